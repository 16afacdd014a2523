import sys

from looptrack.main import main

sys.exit(main())
