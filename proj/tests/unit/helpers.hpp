#pragma once

#include <vector>

#include "fbrank/model.hpp"
#include "fbrank/util.hpp"

namespace testing {

inline fbrank::model::SegmentSummary random_summary(fbrank::Rng& rng, const std::vector<int>& layers,
                                                    const std::vector<int>& dims) {
    fbrank::model::SegmentSummary s;
    for (std::size_t m = 0; m < layers.size(); ++m) {
        Eigen::MatrixXd x(layers[m], dims[m]);
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
        s.per_modality.push_back(x);
    }
    return s;
}

inline fbrank::model::ModelSpec small_spec(std::vector<int> hidden = {}, int out = 6, int layers = 3, int dim = 5) {
    fbrank::model::ModelSpec spec;
    spec.modalities = {fbrank::features::Modality::audio};
    spec.layers = {layers};
    spec.dims = {dim};
    spec.hidden_dims = std::move(hidden);
    spec.output_dim = out;
    return spec;
}

inline std::vector<const fbrank::model::SegmentSummary*> pointers(const std::vector<fbrank::model::SegmentSummary>& v) {
    std::vector<const fbrank::model::SegmentSummary*> out;
    for (const auto& s : v) out.push_back(&s);
    return out;
}

}  // namespace testing
