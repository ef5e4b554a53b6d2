import sys

from ctmle.cli import main

sys.exit(main())
