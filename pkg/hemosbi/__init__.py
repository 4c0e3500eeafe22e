#!/usr/bin/env python
"""hemosbi: pulse wave simulation in reduced arterial networks and neural posterior
estimation of cardiovascular biomarkers from noisy waveform measurements"""

__author__ = "hemosbi developers"
__version__ = "0.3.0"
__license__ = "BSD (3 Clause)"

__all__ = ['vessel', 'hemo', 'population', 'measurement', 'flow', 'npe',
           'toys', 'uncertainty', 'cli', 'utils']
