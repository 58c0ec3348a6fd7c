"""Allow running as python -m inear_anc."""

from inear_anc.cli import main

if __name__ == "__main__":
    main()
