from setuptools import setup, find_packages

setup(
    name="topotta-desk",
    version="0.1.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    install_requires=[
        "click",
        "numpy",
        "Pillow",
        "PyYAML",
        "scikit-image",
        "scipy",
        "texttable",
        "tqdm",
    ],
    extras_require={
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": [
            "topotta=topotta.cli.main:main",
        ],
    },
    description="Desk-scale topology-enhanced test-time adaptation for tubular segmentation",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
)
