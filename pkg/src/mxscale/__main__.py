from mxscale.cli import main

main()
