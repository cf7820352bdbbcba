import sys

from lama_adapter.cli import main

sys.exit(main())
