import sys

from capspoof.cli import main

sys.exit(main())
