#pragma once

// Evaluation metrics for incremental multi-label runs: the lower-triangular
// task-score matrix, precision-weighted Jaccard scoring of predicted label
// sets, the final average score, and the adjusted forgetting measure.
//
// Everything here is a pure function of its arguments: no model types, no
// rng, no global state. Scores are percentages in [0, 100].

#include <iosfwd>
#include <string>
#include <vector>

namespace mlcl {

// Lower-triangular matrix of evaluation scores. Cell (j, k), with
// 1 <= k <= j <= N, holds the score on task k's test set after training
// through task j; a task is only ever evaluated after it has been trained
// on, so cells above the diagonal do not exist. Cells are unset until
// written, which lets a run fill the matrix row by row.
class ResultMatrix {
public:
    explicit ResultMatrix(int num_tasks);

    int num_tasks() const { return n_; }

    // Writes cell (j, k). The value must be finite and in [0, 100].
    void set(int j, int k, double value);

    // Reads cell (j, k); throws std::out_of_range outside the lower
    // triangle and std::logic_error if the cell was never set.
    double at(int j, int k) const;

    bool is_set(int j, int k) const;

    // CSV serialization: header row `j,k,pwjs`, then one row per defined
    // cell in (j, k) order, values with 4 decimal places.
    void write_csv(std::ostream& os) const;
    std::string to_csv() const;

private:
    int index_of(int j, int k) const;  // validates triangle bounds

    int n_ = 0;
    std::vector<double> values_;
    std::vector<char> defined_;
};

// One evaluated sample: the predicted label set and the ground-truth label
// set, both as strictly increasing vectors of label indices.
struct PredictionSet {
    std::vector<int> predicted;
    std::vector<int> truth;
};

// Thresholds sigmoid(logits[c]) > threshold over the introduced classes
// and returns the predicted label set (sorted, possibly empty). Classes
// outside `introduced` are never predicted regardless of their logit.
// `introduced` must be strictly increasing with indices < logits.size();
// threshold must lie strictly inside (0, 1). The default threshold 0.5 is
// equivalent to keeping exactly the classes with positive logits.
std::vector<int> predict_labels(const std::vector<double>& logits,
                                const std::vector<int>& introduced,
                                double threshold = 0.5);

// Precision-weighted Jaccard similarity, averaged over samples and scaled
// to a percentage:
//
//   score(Y, Yhat) = (|Y ∩ Yhat| / |Y ∪ Yhat|) * (|Y ∩ Yhat| / |Yhat|)
//
// Conventions for the empty-prediction corner the formula leaves 0/0:
// Yhat empty with Y nonempty scores 0; Yhat and Y both empty scores 1
// (a correct "nothing applies" prediction). Rejects an empty sample list.
double pwjs(const std::vector<PredictionSet>& samples);

// Mean of the final row: (1/N) * sum_m R_{N,m}. Requires every cell of
// row N to be set; earlier rows may be incomplete.
double final_average_pwjs(const ResultMatrix& matrix);

// Adjusted forgetting over the first N-1 tasks:
//
//   FG = 100 * (1/(N-1)) * sum_m [ (R*_m - R_{N,m}) / R*_m ]+
//   with  R*_m = max over t in {m, ..., N-1} of R_{t,m}
//
// where [.]+ clamps negatives (backward transfer) to zero. The historical
// best R*_m deliberately excludes the final row. Columns with R*_m = 0
// contribute 0: a task that was never learned cannot be forgotten.
// Requires N >= 2 and every cell the formula touches to be set.
double adjusted_forgetting(const ResultMatrix& matrix);

}  // namespace mlcl
