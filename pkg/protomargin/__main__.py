"""Run the protomargin command line with ``python -m protomargin``."""

from protomargin.cli import main


raise SystemExit(main())
