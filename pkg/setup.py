from setuptools import setup, find_packages

with open(file='README.md') as f:
    readme = f.read()

setup(
    name='PartAlign',
    version='0.1.0',
    packages=find_packages(exclude=["tests"]),
    install_requires=[
        "numpy>=1.26",
        "orjson==3.10.12",
    ],
    description='Part-alignment experiments for two-stream fine-grained classifiers on synthetic data',
    long_description=readme,
    long_description_content_type='text/markdown',
    entry_points={
        'console_scripts': [
            'partalign=PartAlign.cli:main',
        ],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Operating System :: Ubuntu 22.04',
    ],
    python_requires='>=3.10',
)
