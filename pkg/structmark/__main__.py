from structmark import main

main()
