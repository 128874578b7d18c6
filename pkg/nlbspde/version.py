# -*- coding: utf-8 -*-

import glob

# Format expected by setup.py and docs/conf.py: string of form "X.Y.Z"
_version_major = 0
_version_minor = 1
_version_micro = 0
_version_extra = ''

# Construct full version string from these.
_ver = [_version_major, _version_minor]
if _version_micro:
    _ver.append(_version_micro)
if _version_extra:
    _ver.append(_version_extra)

__version__ = '.'.join(map(str, _ver))

CLASSIFIERS = ["Development Status :: 3 - Alpha",
               "Environment :: Console",
               "Intended Audience :: Science/Research",
               "License :: OSI Approved :: GPLv3 License",
               "Operating System :: OS Independent",
               "Programming Language :: Python",
               "Topic :: Scientific/Engineering :: Mathematics"]

# Short description:
description = "nlbspde: non-local backward SPDE laboratory"
# Long description (for the pypi page)
long_description = """
Module
======
nlbspde solves linear backward stochastic PDEs with non-local-in-time
boundary conditions (periodic, scaled-initial, point-time and time-integral
conditions) on a finite scenario tree, and checks the solvability theory
behind them: the Fredholm solution formula, the duality identity with the
forward dual equation and the mass-contraction bounds, the latter also by
Monte Carlo simulation of the killed diffusion.
"""

NAME = "nlbspde"
MAINTAINER = ""
MAINTAINER_EMAIL = ""
DESCRIPTION = description
LONG_DESCRIPTION = long_description
URL = ""
DOWNLOAD_URL = ""
LICENSE = "GPLv3"
AUTHOR = ""
AUTHOR_EMAIL = ""
PLATFORMS = "OS Independent"
MAJOR = _version_major
MINOR = _version_minor
MICRO = _version_micro
VERSION = __version__
SCRIPTS = glob.glob("scripts/*.py")

PREVIOUS_MAINTAINERS = []
