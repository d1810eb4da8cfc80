import os
import sys

import lanediff

# If extensions (or modules to document with autodoc) are in another directory,
# add these directories to sys.path here. If the directory is relative to the
# documentation root, use os.path.abspath to make it absolute, like shown here.
sys.path.insert(0, os.path.abspath(".."))

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "sphinx.ext.coverage",
    "sphinx.ext.mathjax",
    "sphinx.ext.napoleon",
    "sphinx.ext.todo",
    "sphinx.ext.viewcode",
    "sphinx_copybutton",
    "sphinx_design",
]

project = "lanediff"
year = "2026"
author = "lanediff developers"
copyright = f"{year}, {author}"

# The short X.Y version.
version = lanediff.__version__.split(" ")[0]
# The full version, including alpha/beta/rc tags.
release = lanediff.__version__

source_suffix = ".rst"
templates_path = ["_templates"]
exclude_patterns = ["_build"]

# -- Options for HTML output ----------------------------------------------

html_theme = "furo"
html_short_title = "%s-%s" % (project, version)
html_last_updated_fmt = "%b %d, %Y"
html_split_index = False

napoleon_use_ivar = True
napoleon_use_rtype = False
napoleon_use_param = False

# copybutton configuration
copybutton_prompt_text = r"\$ "
copybutton_prompt_is_regexp = True

htmlhelp_basename = "lanediff_doc"
