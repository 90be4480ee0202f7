#pragma once

#include <string>
#include <vector>

#include "lmdet/image_io.hpp"
#include "lmdet/model.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

/// One labelled image on disk. Labels are parsed and validated when the
/// manifest is built; pixels are read on demand.
struct SampleRecord {
    std::string image_path;
    std::string label_path;
    int height = 0;  // original image geometry
    int width = 0;
    LandmarkSet landmarks;  // original geometry
};

/// In-memory sample: pixels as an [H, W, 1] tensor in [0,1] plus landmarks
/// in the same geometry.
template <class T>
struct Sample {
    Tensor<T> image;
    LandmarkSet landmarks;
    int domain_id = 0;
    std::string source;
};

struct DatasetManifest {
    DomainSpec spec;
    std::string root;  // domain directory
    std::vector<SampleRecord> train;
    std::vector<SampleRecord> val;
    std::vector<SampleRecord> test;
};

/// domain.cfg is line-oriented key=value text with five required keys:
/// name, num_landmarks, spacing_rule (fixed:<mm_per_px> | wrist:<a>,<b> |
/// pixel), sdr_thresholds (comma list), id_threshold. Wrist indices in the
/// file are 1-based landmark numbers. Blank lines and #-comments are
/// skipped; unknown or duplicate keys are errors.
DomainSpec parse_domain_cfg(const std::string& path);
void write_domain_cfg(const DomainSpec& spec, const std::string& path);

/// The spacing_rule value grammar, also reused by checkpoint headers:
/// "fixed:<mm_per_px>", "wrist:<a>,<b>" (1-based), or "pixel".
std::string spacing_rule_text(const SpacingSpec& spacing);
SpacingSpec parse_spacing_rule(const std::string& value, const std::string& context);

/// Scans <domain_dir>/{train,val,test} for imgNNN.{png,pgm} + imgNNN.csv
/// pairs and validates every label file against the spec and the image
/// geometry. A missing split directory is an empty split; a domain with no
/// samples at all is an error. Errors name the offending file.
DatasetManifest load_dataset(const std::string& domain_dir, const DomainSpec& spec);

/// parse_domain_cfg on <domain_dir>/domain.cfg, then load_dataset.
DatasetManifest load_domain(const std::string& domain_dir);

/// Loads every immediate subdirectory of root that contains a domain.cfg,
/// sorted by directory name; DomainSpec.id is the position in that order.
std::vector<DatasetManifest> load_root(const std::string& root);

template <class T>
Sample<T> load_sample(const SampleRecord& record, int domain_id = 0);

/// Bilinear resize of the pixels plus center-mapped rescale of the labels.
template <class T>
Sample<T> resize_sample(const Sample<T>& sample, int out_h, int out_w);

/// Writes a synthetic domain under <out_root>/<spec.name>: count labelled
/// train images of extent size x size, empty val/ and test/, and a
/// domain.cfg. Every landmark index renders a distinct oriented motif over
/// a noisy gradient background; labels are the exact motif centers on the
/// integer grid. Deterministic per seed. Returns the loaded manifest.
DatasetManifest gen_synthetic(const std::string& out_root, const DomainSpec& spec,
                              int count, int size, unsigned long long seed);

/// One single-domain training batch, as indices into the train split of
/// the sampler's manifest list.
struct Batch {
    int manifest = 0;
    std::string domain;
    std::vector<int> indices;
};

/// Pixels and resized labels for one batch, ready for target rendering.
template <class T>
struct LoadedBatch {
    Tensor<T> images;  // [B, H, W, 1]
    std::vector<LandmarkSet> labels;
    std::string domain;
};

template <class T>
LoadedBatch<T> load_batch(const DatasetManifest& manifest, const Batch& batch,
                          int input_h, int input_w);

/// Emits single-domain batches covering every train sample exactly once per
/// epoch, except that size-1 remainders are dropped. Batch order interleaves
/// domains with pick probability proportional to each domain's remaining
/// batches; the uniform flag switches to a uniform pick over non-exhausted
/// domains. Batch content and order are functions of (seed, call count).
class MixedSampler {
public:
    MixedSampler(const std::vector<DatasetManifest>& manifests, int batch_size,
                 unsigned long long seed, bool uniform = false);

    std::vector<Batch> next_epoch();

    std::string save_state() const { return rng_.save_state(); }
    void load_state(const std::string& state) { rng_.load_state(state); }

private:
    std::vector<std::pair<std::string, int>> domains_;  // (name, train size)
    int batch_size_;
    bool uniform_;
    Rng rng_;
};

}  // namespace lmdet
