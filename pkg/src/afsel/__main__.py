import sys

from afsel.cli import main

sys.exit(main())
