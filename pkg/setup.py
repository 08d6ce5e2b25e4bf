#!/usr/bin/env python
# -*- coding: utf-8 -*-

from setuptools import setup

with open('README.rst') as readme_file:
    readme = readme_file.read()

with open('HISTORY.rst') as history_file:
    history = history_file.read()

requirements = [
    'Click>=7.0',
    'numpy>=1.20',
    'torch>=1.10',
    'Pillow>=8.0',
    'scipy>=1.6',
    'scikit-learn>=0.24',
    'tqdm>=4.50',
]

test_requirements = [
    'pytest>=6.0',
]

setup(
    name='passform',
    version='0.1.0',
    description="passform maps face photos taken under any pose, light or background to a "
                "frontal, neutral, plain-background portrait of the same person.",
    long_description=readme + '\n\n' + history,
    author="Passform Developers",
    url='https://github.com/passform/passform',
    packages=[
        'passform',
    ],
    package_dir={'passform':
                 'passform'},
    package_data={'passform': ['ex_json/*.json']},
    entry_points={
        'console_scripts': [
            'passform=passform.cli:main'
        ]
    },
    include_package_data=True,
    install_requires=requirements,
    python_requires='>=3.7',
    license="MIT license",
    zip_safe=False,
    keywords='passform face normalization gan',
    classifiers=[
        'Development Status :: 2 - Pre-Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Natural Language :: English',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.7',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Topic :: Scientific/Engineering :: Image Recognition',
    ],
    test_suite='tests',
    tests_require=test_requirements
)
