from setuptools import setup

setup(
    name="optical_signature",
    version="1.0.0",
    packages=["optical_signature"],
    python_requires=">=3.9",
    install_requires=[
        "numpy",
        "scipy",
        "opencv-python",
        "pillow",
        "reedsolo",
        "h5py",
        "pyyaml",
        "tqdm",
        "termcolor",
        "matplotlib",
    ],
    extras_require={"vis": ["wandb"], "test": ["pytest"]},
    entry_points={"console_scripts": ["optsig=optical_signature.cli:main"]},
)
