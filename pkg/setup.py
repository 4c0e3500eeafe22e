#!/usr/bin/env python

from setuptools import setup

name = 'hemosbi'
path = 'hemosbi'

## Automatically determine project version ##
def get_version():
    import os

    d = {'__name__': name}
    module_path = os.path.join(path, '__init__.py')

    with open(module_path) as f:
        try:
            exec(f.read(), None, d)
        except Exception:
            pass

    return d.get("__version__", "0.1")

## Use py.test for "setup.py test" command ##
cmdclass = {}
try:
    from setuptools.command.test import test as TestCommand
except ImportError:
    # setuptools >= 72 dropped the test command, run pytest directly
    TestCommand = None

if TestCommand is not None:
    class PyTest(TestCommand):
        def finalize_options(self):
            TestCommand.finalize_options(self)
            self.test_args = []
            self.test_suite = True
        def run_tests(self):
            #import here, cause outside the eggs aren't loaded
            import pytest
            raise SystemExit(pytest.main(self.test_args))
    cmdclass['test'] = PyTest

## Try and extract a long description ##
readme = ""
for readme_name in ("README.rst", "CHANGELOG.rst"):
    try:
        readme += open(readme_name).read() + "\n\n"
    except (OSError, IOError):
        continue

## Finally call setup ##
setup(
    name = name,
    version = get_version(),
    packages = [path],
    package_data = {path: ['networks/*.json']},
    author = "hemosbi developers",
    maintainer=None,
    maintainer_email=None,
    description = "1D arterial haemodynamics simulation and simulation based inference of cardiovascular parameters from pulse waveforms",
    long_description = readme,
    license = "BSD",
    keywords = "haemodynamics blood flow 1d model windkessel pulse wave ppg normalizing flow simulation based inference uncertainty",
    classifiers = [
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: BSD License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Topic :: Scientific/Engineering :: Physics",
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        ],
    entry_points = {"console_scripts": ["hemosbi=hemosbi.cli:main"]},
    zip_safe = False,
    python_requires = '>=3.8',
    setup_requires = [],
    install_requires = ['numpy>=1.20', 'scipy>=1.6', 'torch>=1.10'],
    tests_require = ['tox', 'pytest', 'pytest-cov', 'pytest-mock'],
    cmdclass = cmdclass,
)
