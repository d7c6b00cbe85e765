from setuptools import find_packages, setup

setup(
    name="sargraph",
    version="0.1.0",
    description="Distributed full-batch GNN training with sequential aggregation and rematerialization",
    packages=find_packages(include=["sargraph", "sargraph.*"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.26,<2",
        "pandas>=2.0",
        "pydantic>=2.5",
        "tqdm>=4.66",
    ],
    extras_require={"test": ["pytest>=7.4"]},
    entry_points={"console_scripts": ["sargraph=sargraph.api.cli:main"]},
)
