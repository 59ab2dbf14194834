import sys

from watchtower.wt_cli import main

sys.exit(main())
