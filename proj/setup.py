from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup

sources = [
    "python/bindings.cpp",
    "src/tensor.cpp",
    "src/autodiff.cpp",
    "src/vocab.cpp",
    "src/worldgen.cpp",
    "src/model.cpp",
    "src/infer.cpp",
    "src/trainer.cpp",
    "src/sampler.cpp",
    "src/evalbench.cpp",
    "src/cli.cpp",
]

ext = Pybind11Extension(
    "argen._core",
    sources=sources,
    include_dirs=["include", "vendor", "/usr/include/eigen3"],
    cxx_std=20,
    extra_compile_args=["-O3", "-fno-math-errno"],
)

setup(
    name="argen",
    packages=["argen"],
    package_dir={"argen": "python/argen"},
    ext_modules=[ext],
    cmdclass={"build_ext": build_ext},
)
