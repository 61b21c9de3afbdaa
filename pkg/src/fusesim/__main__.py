import sys

from fusesim.cli import main

sys.exit(main())
