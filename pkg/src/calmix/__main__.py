from calmix.harness.cli import main

raise SystemExit(main())
