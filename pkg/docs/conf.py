# -*- coding: utf-8 -*-
#
# pyrfdeblur documentation build configuration file

import sys, os

# Make the package importable without installation
sys.path.insert(0, os.path.abspath('..'))

extensions = ['sphinx.ext.autodoc',
              'sphinx_automodapi.automodapi',
              'sphinx.ext.autosummary',
              'autodocsumm',
              'sphinx_autodoc_typehints',
              'sphinx.ext.coverage']

autodoc_default_options = {
    'autosummary': True,
    'member-order': 'bysource'
}

# Type hints go into the parameter lists
autodoc_typehints = 'description'
automodapi_inheritance_diagram = False

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'pyrfdeblur'
copyright = u'2026, pyrfdeblur developers'
author = 'pyrfdeblur developers'

version = 'v0.1.0'
release = 'v0.1.0'

exclude_patterns = ['_build']
pygments_style = 'sphinx'

html_theme = 'sphinx_rtd_theme'
html_static_path = ['_static']
htmlhelp_basename = 'pyrfdeblurdoc'

latex_documents = [
  ('index', 'pyrfdeblur.tex', u'pyrfdeblur Documentation', author, 'manual'),
]

man_pages = [
    ('index', 'pyrfdeblur', u'pyrfdeblur Documentation', [author], 1)
]
