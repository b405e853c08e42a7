from setuptools import setup, find_packages

if __name__ == "__main__":
    setup(
        name="stemedit",
        version="1.0.0",
        packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
        include_package_data=True,
        install_requires=[
            "torch>=2.2.1",
            "python-dotenv>=1.0.0",
            "numpy>=1.25.2",
            "ffmpeg-python>=0.2.0",
            "colorlog>=6.7.0",
            "soundfile>=0.12.1",
            "scipy>=1.11.0",
            "scikit-learn>=1.3.0",
            "tqdm>=4.66.0"
        ],
        extras_require={
            "test": [
                "pytest>=7.4.4",
                "pytest-cov>=4.1.0",
                "pytest-xdist>=3.5.0",
                "pytest-timeout>=2.1.0",
                "pytest-mock>=3.12.0"
            ]
        },
        entry_points={
            "console_scripts": ["stemedit=modules.cli:main"],
        },
        python_requires=">=3.10",
    )
