"""
pytest wiring: vsc.install's test helpers expect to run under 'python setup.py test',
which locates the repository through sys.argv[0] and puts bin/ on sys.path.
The examples/ reference pack is not part of the package and is kept out of prospector,
as it is kept out of pytest collection.
"""
import os
import sys

from vsc.install.commontest import prospector_ignore_paths_add

REPO_BASE_DIR = os.path.dirname(os.path.abspath(__file__))

os.environ.setdefault("REPO_BASE_DIR", REPO_BASE_DIR)
sys.path.insert(0, os.path.join(REPO_BASE_DIR, "bin"))
prospector_ignore_paths_add("examples")
