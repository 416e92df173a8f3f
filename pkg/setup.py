import pathlib

from setuptools import find_packages, setup

here = pathlib.Path(__file__).parent.resolve()
long_description = (here / "README.md").read_text(encoding="utf-8")

setup(
    name="foleyforge",
    version="0.1.0",
    description="Desk-scale video-to-audio generation with preference optimization",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(include=["foleyforge"]),
    platforms="linux",
    python_requires=">=3.9",
    license="AGPLv3",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: GNU Affero General Public License v3",
        "Operating System :: POSIX",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3 :: Only",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Multimedia :: Sound/Audio",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    install_requires=[
        "docopt",
        "numpy >= 1.22",
        "PyYAML >= 6.0",
        "torch >= 2.0",
        "tqdm",
        "Werkzeug >= 2.0.0",
    ],
    extras_require={
        "dev": ["tox", "black", "isort"],
        "test": ["flake8", "coverage"],
    },
    entry_points={"console_scripts": ["forge=foleyforge.cli:main"]},
)
