# -*- coding: utf-8 -*-
#
# hemosbi documentation build configuration file

import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join('..', '..')))

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.doctest',
    'sphinx.ext.intersphinx',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
]

# API pages build without torch installed
autodoc_mock_imports = ['torch']

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'hemosbi'
copyright = u'2026, hemosbi developers'
version = '0.3'
release = '0.3.0'

exclude_patterns = []
pygments_style = 'sphinx'

html_theme = 'default'
html_static_path = ['_static']
htmlhelp_basename = 'hemosbidoc'

latex_documents = [
  ('index', 'hemosbi.tex', u'hemosbi Documentation', u'hemosbi developers', 'manual'),
]

man_pages = [
    ('index', 'hemosbi', u'hemosbi Documentation', [u'hemosbi developers'], 1)
]

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable', None),
}
