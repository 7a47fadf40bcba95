import sys

from few_tensorf.cli.main import main

sys.exit(main())
