import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

with open("requirements.txt", "r") as fh:
    requires = [line for line in fh.read().splitlines() if line != ""]

setuptools.setup(
    name="scv2",
    version="0.1.0",
    description="Desk-scale surfel splatting: block-parallel tuning, compression, meshing and geometry evaluation",
    python_requires=">=3.9",
    install_requires=requires,
    extras_require={"plot": ["matplotlib"], "test": ["pytest"]},
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests"]),
    entry_points={"console_scripts": ["scv2=SCV2.cli:main"]},
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
