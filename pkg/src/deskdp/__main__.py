import sys

from deskdp.cli import main

sys.exit(main())
