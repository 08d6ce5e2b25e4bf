#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Sphinx configuration for the passform documentation.

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import passform  # noqa: E402

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.napoleon', 'sphinx.ext.viewcode']
autodoc_mock_imports = ['torch', 'sklearn', 'scipy']
autodoc_member_order = 'bysource'

source_suffix = '.rst'
master_doc = 'index'
exclude_patterns = ['_build']

project = 'passform'
copyright = '2026, Passform Developers'
version = passform.__version__
release = passform.__version__

pygments_style = 'sphinx'
html_theme = 'default'
htmlhelp_basename = 'passformdoc'

man_pages = [
    ('index', 'passform', 'passform Documentation', ['Passform Developers'], 1),
]
