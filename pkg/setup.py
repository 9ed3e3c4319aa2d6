from setuptools import find_packages, setup

setup(
    name="django_inverse_rt",
    version="0.1.0",
    description="A Django app for estimating RF material conductivities with a differentiable ray tracer.",
    author="lte-packages",
    author_email="contact@lte-packages.com",
    packages=find_packages(exclude=["tests*"]),
    include_package_data=True,
    package_data={"django_inverse_rt": ["templates/**/*", "data/*"]},
    python_requires=">=3.10",
    install_requires=[
        "Django>=3.2",
        "celery",
        "redis",
        "requests",
        "numpy",
        "scipy",
    ],
    classifiers=[
        "Framework :: Django",
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
