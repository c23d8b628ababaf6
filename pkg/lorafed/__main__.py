import sys

from lorafed.cli import main

sys.exit(main())
