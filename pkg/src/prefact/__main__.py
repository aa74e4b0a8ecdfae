import sys
from prefact.cli import main

sys.exit(main())
