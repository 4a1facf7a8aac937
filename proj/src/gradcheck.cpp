#include "demaformer/gradcheck.hpp"

#include <cmath>
#include <limits>

namespace demaformer {

GradCheckReport finite_diff_check_report(const std::function<Tensor()>& f,
                                         const std::vector<Tensor>& params, double h) {
    DMF_CHECK(h > 0.0, "finite_diff_check: step must be positive");
    GradCheckReport report;

    for (Tensor p : params) p.zero_grad();
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tape::Scope scope(&tape);
        Tensor loss = f();
        if (!std::isfinite(loss.item())) {
            report.finite = false;
            report.max_rel_err = std::numeric_limits<double>::infinity();
            return report;
        }
        tape.backward(loss);
    }
    analytic.reserve(params.size());
    for (const Tensor& p : params) analytic.push_back(p.grad());

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double saved = p.at(i);
            p.at(i) = saved + h;
            const double f_plus = f().item();
            p.at(i) = saved - h;
            const double f_minus = f().item();
            p.at(i) = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                report.finite = false;
                report.max_rel_err = std::numeric_limits<double>::infinity();
                return report;
            }
            const double central = (f_plus - f_minus) / (2.0 * h);
            const double rel =
                std::fabs(analytic[pi][i] - central) / std::max(1.0, std::fabs(central));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = "param" + std::to_string(pi) + "/" + std::to_string(i);
            }
        }
    }
    return report;
}

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double h) {
    return finite_diff_check_report(f, params, h).max_rel_err;
}

}  // namespace demaformer
