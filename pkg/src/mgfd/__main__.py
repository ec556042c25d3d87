import sys

from mgfd.cli import main

sys.exit(main())
