import sys

from splitcom.main import main

sys.exit(main())
