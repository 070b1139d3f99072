from coopfield.cli import main

raise SystemExit(main())
