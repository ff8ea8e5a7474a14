import sys

from regjacobi.cli import main

sys.exit(main())
