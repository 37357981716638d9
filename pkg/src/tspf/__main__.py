import sys

from tspf.cli import main

sys.exit(main())
