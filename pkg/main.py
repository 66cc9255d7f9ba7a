"""Thin entrypoint for local use.
Loads .env and hands over to the mcdnet command line.
"""
from dotenv import load_dotenv

from mcdnet.cli import main

if __name__ == "__main__":
    # Settings are re-read in mcdnet.config; this only seeds the environment early
    try:
        load_dotenv()
    except Exception:
        pass
    main()
