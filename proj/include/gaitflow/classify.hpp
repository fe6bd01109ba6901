#pragma once

#include "gaitflow/gaitnet.hpp"

namespace gaitflow {

/// Identities ordered best-first with their decision scores (non-increasing;
/// exact ties broken by ascending label).
struct RankedPrediction {
    std::vector<int> identities;
    std::vector<float> scores;
};

struct SvmEnsemble {
    int dim = 0;
    std::vector<int> labels;                  // class per member, ascending
    std::vector<std::vector<float>> weights;  // per class, length dim
    std::vector<float> bias;
    double lambda = 1e-4;
};

struct SvmTrainParams {
    double lambda = 1e-4;
    int epochs = 100;
    double lr0 = 1.0;
    uint64_t seed = 1;
};

struct PcaModel {
    int dim = 0;
    int k = 0;
    std::vector<float> mean;       // length dim
    std::vector<float> basis;      // dim x k, row-major (k orthonormal columns)
    std::vector<float> explained;  // per-component variance, length k
    double total_variance = 0.0;

    std::vector<float> column(int j) const;
};

struct GallerySet {
    int dim = 0;
    std::vector<int> labels;
    std::vector<std::vector<float>> vectors;
};

// -------------------------------------------------------------------- svm

/// One linear SVM per class (one-vs-all), trained by deterministic averaged
/// sub-gradient descent on the hinge loss; the bias is unregularized. When
/// `classes` is given, every listed class must be present in `labels`.
SvmEnsemble train_ovr_svm(const std::vector<GaitSignature>& sigs,
                          const std::vector<int>& labels, const SvmTrainParams& params = {},
                          const std::vector<int>& classes = {});

RankedPrediction svm_rank(const SvmEnsemble& ens, const std::vector<float>& sig);
inline RankedPrediction svm_rank(const SvmEnsemble& ens, const GaitSignature& sig) {
    return svm_rank(ens, sig.vector);
}

/// Binary gender classifier: the exact C=2 case of train_ovr_svm with
/// labels 0 (female) and 1 (male).
SvmEnsemble train_gender_svm(const std::vector<GaitSignature>& sigs,
                             const std::vector<int>& gender_labels,
                             const SvmTrainParams& params = {});

// -------------------------------------------------------------------- pca

/// Inputs are L2-normalized and mean-centered, then the top-k eigenvectors of
/// the covariance are extracted (via the Gram matrix when samples < dim).
/// Sign convention: the largest-magnitude component of each basis column is
/// positive.
PcaModel fit_pca(const std::vector<GaitSignature>& sigs, int k);
PcaModel fit_pca_vectors(const std::vector<std::vector<float>>& rows, int k);

/// basis^T (x - mean); x is expected to be L2-normalized already (gait
/// signatures are unit-norm by construction).
std::vector<float> pca_project(const PcaModel& m, const std::vector<float>& x);
inline std::vector<float> pca_project(const PcaModel& m, const GaitSignature& sig) {
    return pca_project(m, sig.vector);
}

// --------------------------------------------------------------------- nn

/// Scores every gallery identity by -min Euclidean distance to its vectors.
RankedPrediction nn_rank(const GallerySet& gallery, const std::vector<float>& query);

// ------------------------------------------------------------------ voting

/// Per-video ranking: identities ordered by top-1 vote count, then mean
/// top-1 score among their votes (zero-vote identities follow, ordered by
/// their mean score over all subsequences), then ascending label.
RankedPrediction vote_ranking(const std::vector<RankedPrediction>& preds);

/// Identity with the most top-1 votes; equals vote_ranking(preds) rank 1.
int majority_vote(const std::vector<RankedPrediction>& preds);

// -------------------------------------------------------------------- io

void save_svm(const SvmEnsemble& ens, const std::string& path);       // GFSV
SvmEnsemble load_svm(const std::string& path);
void save_pca(const PcaModel& m, const std::string& path);            // GFPC
PcaModel load_pca(const std::string& path);
void save_gallery(const GallerySet& g, const std::string& path);     // GFGL
GallerySet load_gallery(const std::string& path);

/// Signature tables reuse the GFGL layout; the JSON sidecar carries the
/// per-row subject/sequence/scenario/window metadata needed for voting.
void save_signatures(const std::vector<GaitSignature>& sigs, const std::string& path);
std::vector<GaitSignature> load_signatures(const std::string& path);

}  // namespace gaitflow
