from setuptools import setup, find_packages

with open("requirements.txt") as f:
    requirements = f.read().splitlines()

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name = "watchtower",
    version = "0.1.0",
    author = "Watchtower Developers",
    description = "Online video anomaly assistant: streaming prediction, detection and analysis on synthetic video",
    long_description = long_description,
    long_description_content_type = "text/markdown",
    license = "MIT",
    packages = find_packages(exclude = ["tests", "tests.*"]),
    python_requires = ">=3.10",
    install_requires = requirements,
    entry_points = {
        "console_scripts": ["watchtower = watchtower.wt_cli:main"]
    }
)
