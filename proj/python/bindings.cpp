#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <iostream>

#include "argen/cli.hpp"
#include "argen/model.hpp"
#include "argen/sampler.hpp"
#include "argen/tensor.hpp"

namespace py = pybind11;

PYBIND11_MODULE(_core, m) {
    m.doc() = "token-grid personalization core";

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            const int rc = argen::cli::run_cli(args);
            std::cout.flush();  // host process may inspect captured fds before exit
            return rc;
        },
        py::arg("args"), "invoke the command line in-process; returns its exit code");

    m.def(
        "cfg_combine",
        [](const std::vector<double>& cond, const std::vector<double>& uncond, double s) {
            const argen::Tensor c = argen::Tensor::vec(cond);
            const argen::Tensor u = argen::Tensor::vec(uncond);
            const argen::Tensor r = argen::sampler::cfg_combine(c, u, s);
            return std::vector<double>(r.data(), r.data() + r.size());
        },
        py::arg("cond"), py::arg("uncond"), py::arg("scale"));

    m.def("count_trainable_params_lora", &argen::model::count_trainable_params_lora, py::arg("d"),
          py::arg("layers"), py::arg("rank"), py::arg("every_n"), py::arg("targets") = 3);
    m.def("count_trainable_params_full_attn", &argen::model::count_trainable_params_full_attn, py::arg("d"),
          py::arg("layers"));
    m.def("count_trainable_params_embedding", &argen::model::count_trainable_params_embedding,
          py::arg("rows"), py::arg("d"));
}
