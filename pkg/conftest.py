# keeps the repository root on sys.path so tests import `src.*` like RunSession.py does
