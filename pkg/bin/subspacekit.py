#!/usr/bin/env python
#
# Copyright 2024-2026 Ghent University
#
# This file is part of vsc-subspacekit,
# originally created by the HPC team of Ghent University (http://ugent.be/hpc/en),
# with support of Ghent University (http://ugent.be/hpc),
# the Flemish Supercomputer Centre (VSC) (https://www.vscentrum.be),
# the Flemish Research Foundation (FWO) (http://www.fwo.be/en)
# and the Department of Economy, Science and Innovation (EWI) (http://www.ewi-vlaanderen.be/en).
#
# https://github.com/hpcugent/vsc-subspacekit
#
# All rights reserved.
#
"""
Subspace clustering with closed-form self-expression: synthetic data, fits, lambda sweeps
and parameter audits. Run with --help for the options.
"""
import sys

from vsc.subspacekit.cli import main
from vsc.utils import fancylogger

if __name__ == '__main__':
    fancylogger.logToScreen(True)
    fancylogger.setLogLevelWarning()
    sys.exit(main())
