#pragma once

#include <limits>
#include <map>
#include <string>
#include <vector>

#include "lmdet/model.hpp"
#include "lmdet/param_store.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

/// One serialized tensor: raw little-endian values at the stated precision
/// (4 = float, 8 = double).
struct TensorRecord {
    std::string name;
    Shape shape;
    int precision = 4;
    std::vector<unsigned char> data;
};

/// Adam moments for one parameter. t counts the updates this parameter has
/// received, which drives its bias correction under sparse domain updates.
struct AdamSlot {
    long long t = 0;
    std::vector<double> m;
    std::vector<double> v;
};

/// Complete training snapshot. Parameter names keep their namespace
/// prefixes: "domain/<name>/..." is domain-owned, everything else shared.
///
/// File layout (all integers little-endian, fixed width):
///   magic "LMDTCKPT" | u32 version | u64 len + arch text
///   u64 count + parameter records
///   u64 count + buffer records            (batch-norm running statistics)
///   u64 count + adam slots
///   i64 step | i32 epoch | f64 best validation loss
///   u64 len + sampler state text
/// record: u64 len + name | u32 rank | i32 dims | u32 precision |
///         u64 byte count | raw values
/// slot:   u64 len + name | i64 t | u64 n | f64 m[n] | f64 v[n]
struct Checkpoint {
    int format_version = 1;
    std::string arch_text;
    std::vector<TensorRecord> params;
    std::vector<TensorRecord> buffers;
    std::map<std::string, AdamSlot> adam;
    long long step = 0;
    int epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::string sampler_state;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Copies every parameter and buffer of the store into records.
template <class T>
void capture_params(const ParamStore<T>& store, Checkpoint& ckpt);

/// Writes record values back into an identically shaped store. The name
/// sets must match exactly in both directions.
template <class T>
void restore_params(const Checkpoint& ckpt, ParamStore<T>& store);

/// Canonical architecture header: network shape, landmark domains in
/// registration order, and the training input extent.
struct ArchInfo {
    NetworkConfig net;
    std::vector<DomainSpec> domains;
    int input_size = 0;
};

std::string arch_text(const NetworkConfig& cfg, const std::vector<DomainSpec>& domains,
                      int input_size);
ArchInfo parse_arch_text(const std::string& text);

}  // namespace lmdet
