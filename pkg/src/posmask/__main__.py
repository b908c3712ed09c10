import sys

from posmask.cli import main

sys.exit(main())
