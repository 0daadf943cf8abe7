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
Deep closed-form subspace clustering: closed-form ridge self-expression on learned
auto-encoder codes, followed by spectral clustering. The learnable-layer deep subspace
clustering network is included as a baseline.
"""
import pkg_resources
pkg_resources.declare_namespace(__name__)


class SubspaceKitError(Exception):
    """Root of all errors raised by vsc.subspacekit"""
