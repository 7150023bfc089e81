"""
Setup script for evidencemap
"""

from setuptools import setup, find_packages
from pathlib import Path

# Read the README file
this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text()

setup(
    name="evidencemap",
    version="0.1.0",
    author="Your Name",
    author_email="your.email@example.com",
    description="Evidence-map analysis encoder with soft-prompt conditioning of a frozen generative decoder",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.9",
    install_requires=[
        "requests>=2.28.0",
        "tenacity>=8.2.0",
        "pandas>=1.5.0",
        "openpyxl>=3.0.0",
        "numpy>=1.23.0",
        "toml>=0.10.2",
        "torch>=2.4.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "pytest-mock>=3.10.0",
            "flake8>=5.0.0",
            "black>=22.0.0",
            "mypy>=1.0.0",
            "pre-commit>=3.0.0",
        ],
        "pretrained": [
            "transformers>=4.40.0",
            "sentence-transformers>=2.6.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "evidencemap=evidencemap.cli:main",
        ],
    },
    zip_safe=False,
)
