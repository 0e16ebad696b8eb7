# Sphinx configuration for the cdlf docs.
import os
import sys

sys.path.insert(0, os.path.abspath('..'))

from cdlf import __version__  # noqa: E402
from cdlf.main import _get_parser  # noqa: E402

# cli.rst includes the live argparse help
GEN_DIR = os.path.join(os.path.dirname(os.path.realpath(__file__)), "_gen")
os.makedirs(GEN_DIR, exist_ok=True)

usage = _get_parser().format_help().replace("sphinx-build", "cdlf")
with open(os.path.join(GEN_DIR, 'usage.rst'), 'w') as f:
    f.write('.. code-block:: text\n\n')
    f.write('\n'.join('  ' + line for line in usage.splitlines()))
    f.write('\n')

project = 'cdlf'
author = 'cdlf contributors'
copyright = '2026, ' + author
release = __version__
version = '.'.join(release.split('.')[:2])

extensions = []
templates_path = ['_templates']
exclude_patterns = ['_build', '_gen', 'Thumbs.db', '.DS_Store']

html_theme = 'alabaster'
html_theme_options = {
    'show_powered_by': False,
    'description': 'Contextual diffusion life-cycle forecasting',
}
