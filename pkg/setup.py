from setuptools import find_packages, setup

setup(
    name='DcgKit',
    version='0.1.0',
    packages=find_packages(),
    package_data={
        'DcgKit': ['data/*.csv', 'tests/Files/*']
    },
    install_requires=[
        'numpy',
        'scipy>=1.8',
        'pandas>=1.5',
        'click',
        'biopython'
    ],
    extras_require={
        'test': ['pytest', 'hypothesis']
    },
    entry_points={
        'console_scripts': [
            'dcgkit=DcgKit.scripts.dcgkit:run'
        ]
    }
)
