from setuptools import setup, find_packages
import os
import re


def read(fname):
    return open(os.path.join(os.path.dirname(__file__), fname)).read()


def version():
    return re.search(r"__version__ = '([^']+)'",
                     read(os.path.join('regionlets', '__init__.py'))).group(1)

setup(
    name='regionlets',
    version=version(),
    license="BSD (3-clause)",
    packages=find_packages(),
    long_description=read('README.md'),
    python_requires='>=3.8',
    install_requires=['numpy', 'pyyaml', 'doct', 'pillow'],
    extras_require={'test': ['pytest', 'hypothesis']},
    entry_points={
        'console_scripts': ['regionlets = regionlets.cli:main'],
    },
    classifiers=[
        "License :: OSI Approved :: BSD License",
        "Development Status :: 3 - Alpha",
        'Programming Language :: Python :: 3',
    ],
)
