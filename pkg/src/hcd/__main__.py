import sys

from hcd.cli import main

sys.exit(main())
