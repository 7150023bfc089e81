import sys

from evidencemap.cli import main

sys.exit(main())
