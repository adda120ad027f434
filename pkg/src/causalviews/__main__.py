from causalviews.cli import main

raise SystemExit(main())
