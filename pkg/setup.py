# -*- coding: utf-8 -*-

from setuptools import setup, find_packages

# minimal requirements for installing pyrfdeblur
# note that `pip` requires setuptools itself
requirements_default = set([
    'numpy',      # all data structures
    'scipy',      # FFT, image filtering and rotations
    'Pillow',     # 8-bit PNG images
    'pydantic>=2',  # validated configuration, manifests and reports
    'tqdm',       # optimiser progress
    'setuptools'  # used for packaging
])

# "easy" requirements should install without compiling
# anything on Windows, Linux, and Mac
requirements_easy = set([
    'setuptools',  # do setuptools stuff
    'colorlog'])   # log in pretty colors


# requirements for building documentation
requirements_docs = set([
    'sphinx',
    'sphinx_rtd_theme',
    'sphinx-automodapi',
    'sphinx-autodoc-typehints',
    'autodocsumm'])

with open('README.rst') as f:
    readme = f.read()

setup(
    name='pyrfdeblur',
    version='0.1.0',
    description='Iterative multi-view deblurring with voxel grid radiance fields',
    long_description=readme,
    keywords='Deblurring, Radiance Fields, Novel View Synthesis, Deconvolution, Camera Shake, Defocus',
    classifiers=[
        'Programming Language :: Python',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Natural Language :: English',
        'Topic :: Scientific/Engineering :: Image Processing'],
    packages=find_packages(exclude=('tests', 'docs')),
    python_requires='>=3.9',
    install_requires=list(requirements_default),
    extras_require={'easy': list(requirements_easy),
                    'docs': list(requirements_docs)},
    entry_points={'console_scripts': ['rfdeblur = pyrfdeblur.cli:main']}
)
