from e2bows.cli import main

main()
