import sys

from regret_audit.cli import main

sys.exit(main())
