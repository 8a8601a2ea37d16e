from setuptools import setup, find_packages

setup(
    name="motion_refine",
    version="0.0.1",
    description="Refinement of global human motion with predicted velocity and acceleration fields",
    packages=find_packages(exclude=["contrib", "docs", "tests"]),
    classifiers=[
        "Development Status :: 4 - Beta",
        # Indicate who your project is intended for
        "Intended Audience :: Science/Research",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    install_requires=[
        "numpy",
        "scipy>=1.4",
        "torch>=1.10",
        "networkx",
        "tqdm",
    ],
    extras_require={"test": ["pytest"]},
    include_package_data=True,
    package_data={"motion_refine": ["data/*.json"]},
    entry_points={"console_scripts": ["motion-refine=motion_refine.cli:main"]},
)
