#!/usr/bin/env python

from setuptools import setup, find_packages

setup(
    name='hjhom',
    description='Effective Hamiltonians of degenerate viscous Hamilton-Jacobi equations in one dimension',
    packages=find_packages(exclude=['tests']),
    platforms='any',
    keywords=['homogenization', 'hamilton-jacobi', 'viscosity solutions'],
    install_requires=[
        'atomicwrites',
        'numpy>=1.17',
        'scipy>=1.6',
        'pandas',
    ],
    entry_points={
          'console_scripts': [
              'hjhom = hjhom.__main__:mainWrapper',
          ]
    },
    setup_requires=[
        'setuptools_scm',
    ],
    use_scm_version=True)
