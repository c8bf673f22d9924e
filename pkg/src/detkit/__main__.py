from detkit.cli import main

main()
