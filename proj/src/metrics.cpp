#include "mlcl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mlcl {

namespace {

void check_index_set(const std::vector<int>& s, const char* what) {
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] < 0) {
            throw std::invalid_argument(std::string(what) +
                                        ": negative label index");
        }
        if (i > 0 && s[i] <= s[i - 1]) {
            throw std::invalid_argument(
                std::string(what) +
                ": label indices must be strictly increasing");
        }
    }
}

std::size_t intersection_size(const std::vector<int>& a,
                              const std::vector<int>& b) {
    std::size_t i = 0, j = 0, n = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) {
            ++i;
        } else if (b[j] < a[i]) {
            ++j;
        } else {
            ++n;
            ++i;
            ++j;
        }
    }
    return n;
}

double sample_score(const PredictionSet& s) {
    if (s.predicted.empty()) return s.truth.empty() ? 1.0 : 0.0;
    const double inter =
        static_cast<double>(intersection_size(s.predicted, s.truth));
    const double uni = static_cast<double>(s.predicted.size()) +
                       static_cast<double>(s.truth.size()) - inter;
    return (inter / uni) * (inter / static_cast<double>(s.predicted.size()));
}

}  // namespace

ResultMatrix::ResultMatrix(int num_tasks) : n_(num_tasks) {
    if (num_tasks < 1) {
        throw std::invalid_argument(
            "ResultMatrix: need at least one task");
    }
    const std::size_t cells =
        static_cast<std::size_t>(n_) * (static_cast<std::size_t>(n_) + 1) / 2;
    values_.assign(cells, 0.0);
    defined_.assign(cells, 0);
}

int ResultMatrix::index_of(int j, int k) const {
    if (j < 1 || j > n_ || k < 1 || k > j) {
        throw std::out_of_range("ResultMatrix: cell (" + std::to_string(j) +
                                "," + std::to_string(k) +
                                ") is outside the lower triangle of an " +
                                std::to_string(n_) + "-task matrix");
    }
    return j * (j - 1) / 2 + (k - 1);
}

void ResultMatrix::set(int j, int k, double value) {
    const int idx = index_of(j, k);
    if (!std::isfinite(value) || value < 0.0 || value > 100.0) {
        throw std::invalid_argument(
            "ResultMatrix: score must be a finite percentage in [0,100]");
    }
    values_[idx] = value;
    defined_[idx] = 1;
}

double ResultMatrix::at(int j, int k) const {
    const int idx = index_of(j, k);
    if (!defined_[idx]) {
        throw std::logic_error("ResultMatrix: cell (" + std::to_string(j) +
                               "," + std::to_string(k) + ") was never set");
    }
    return values_[idx];
}

bool ResultMatrix::is_set(int j, int k) const {
    return defined_[index_of(j, k)] != 0;
}

void ResultMatrix::write_csv(std::ostream& os) const {
    os << "j,k,pwjs\n";
    for (int j = 1; j <= n_; ++j) {
        for (int k = 1; k <= j; ++k) {
            if (!is_set(j, k)) continue;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.4f", at(j, k));
            os << j << ',' << k << ',' << buf << '\n';
        }
    }
}

std::string ResultMatrix::to_csv() const {
    std::ostringstream os;
    write_csv(os);
    return os.str();
}

std::vector<int> predict_labels(const std::vector<double>& logits,
                                const std::vector<int>& introduced,
                                double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw std::invalid_argument(
            "predict_labels: threshold must lie strictly inside (0,1)");
    }
    check_index_set(introduced, "predict_labels: introduced");
    // sigmoid(z) > t  <=>  z > ln(t / (1 - t)); comparing in logit space
    // keeps the t = 0.5 boundary exact (cutoff 0.0) where evaluating the
    // sigmoid itself would round to 1/2 for tiny positive logits.
    const double cutoff = std::log(threshold / (1.0 - threshold));
    std::vector<int> out;
    for (int c : introduced) {
        if (static_cast<std::size_t>(c) >= logits.size()) {
            throw std::out_of_range(
                "predict_labels: introduced class " + std::to_string(c) +
                " exceeds the logit width " + std::to_string(logits.size()));
        }
        if (logits[static_cast<std::size_t>(c)] > cutoff) out.push_back(c);
    }
    return out;
}

double pwjs(const std::vector<PredictionSet>& samples) {
    if (samples.empty()) {
        throw std::invalid_argument("pwjs: empty sample list");
    }
    double acc = 0.0;
    for (const PredictionSet& s : samples) {
        check_index_set(s.predicted, "pwjs: predicted");
        check_index_set(s.truth, "pwjs: truth");
        acc += sample_score(s);
    }
    return 100.0 * acc / static_cast<double>(samples.size());
}

double final_average_pwjs(const ResultMatrix& matrix) {
    const int n = matrix.num_tasks();
    double acc = 0.0;
    for (int k = 1; k <= n; ++k) {
        if (!matrix.is_set(n, k)) {
            throw std::invalid_argument(
                "final_average_pwjs: last row incomplete, cell (" +
                std::to_string(n) + "," + std::to_string(k) + ") is unset");
        }
        acc += matrix.at(n, k);
    }
    return acc / static_cast<double>(n);
}

double adjusted_forgetting(const ResultMatrix& matrix) {
    const int n = matrix.num_tasks();
    if (n < 2) {
        throw std::invalid_argument(
            "adjusted_forgetting: needs at least two tasks");
    }
    auto require = [&matrix](int j, int k) {
        if (!matrix.is_set(j, k)) {
            throw std::invalid_argument(
                "adjusted_forgetting: cell (" + std::to_string(j) + "," +
                std::to_string(k) + ") is unset");
        }
        return matrix.at(j, k);
    };
    double acc = 0.0;
    for (int m = 1; m <= n - 1; ++m) {
        double best = 0.0;
        for (int t = m; t <= n - 1; ++t) best = std::max(best, require(t, m));
        const double last = require(n, m);
        if (best > 0.0) acc += std::max((best - last) / best, 0.0);
    }
    return 100.0 * acc / static_cast<double>(n - 1);
}

}  // namespace mlcl
