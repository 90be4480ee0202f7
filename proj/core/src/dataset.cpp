#include "lmdet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "lmdet/errors.hpp"
#include "lmdet/layers.hpp"
#include "lmdet/ops.hpp"

namespace fs = std::filesystem;

namespace lmdet {

namespace {

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trimmed(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
    std::string t = trimmed(s);
    if (t.empty()) return false;
    char* end = nullptr;
    out = std::strtod(t.c_str(), &end);
    return end == t.c_str() + t.size() && std::isfinite(out);
}

bool parse_long(const std::string& s, long& out) {
    std::string t = trimmed(s);
    if (t.empty()) return false;
    char* end = nullptr;
    out = std::strtol(t.c_str(), &end, 10);
    return end == t.c_str() + t.size();
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
        size_t pos = s.find(sep, start);
        if (pos == std::string::npos) {
            parts.push_back(s.substr(start));
            return parts;
        }
        parts.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

}  // namespace

SpacingSpec parse_spacing_rule(const std::string& value, const std::string& context) {
    auto fail = [&](const std::string& why) -> SpacingSpec {
        throw DataError(context + ": bad spacing_rule '" + value + "' (" + why + ")");
    };
    if (value == "pixel") return SpacingSpec::pixels();
    if (value.rfind("fixed:", 0) == 0) {
        double mm = 0.0;
        if (!parse_double(value.substr(6), mm) || mm <= 0.0)
            return fail("want fixed:<mm_per_px> with a positive number");
        return SpacingSpec::fixed(mm);
    }
    if (value.rfind("wrist:", 0) == 0) {
        auto parts = split(value.substr(6), ',');
        long a = 0, b = 0;
        if (parts.size() != 2 || !parse_long(parts[0], a) || !parse_long(parts[1], b))
            return fail("want wrist:<idxA>,<idxB>");
        if (a < 1 || b < 1) return fail("wrist landmark numbers are 1-based");
        // 1-based landmark numbers in the file, 0-based indices in memory.
        return SpacingSpec::wrist(static_cast<int>(a - 1), static_cast<int>(b - 1));
    }
    return fail("want fixed:<mm_per_px>, wrist:<idxA>,<idxB>, or pixel");
}

std::string spacing_rule_text(const SpacingSpec& spacing) {
    switch (spacing.rule) {
        case SpacingRule::fixed_mm:
            return "fixed:" + fmt_g(spacing.mm_per_pixel);
        case SpacingRule::wrist_pair:
            return "wrist:" + std::to_string(spacing.wrist_a + 1) + "," +
                   std::to_string(spacing.wrist_b + 1);
        case SpacingRule::pixel:
            return "pixel";
    }
    throw ContractError("unhandled spacing rule");
}

namespace {

LandmarkSet parse_label_csv(const std::string& path, int num_landmarks, int height,
                            int width) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open label file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();
    if (text.find('\r') != std::string::npos)
        throw DataError(path + ": carriage return found (labels use LF line endings)");

    std::vector<std::string> lines = split(text, '\n');
    if (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (static_cast<int>(lines.size()) != num_landmarks)
        throw DataError(path + ": label count mismatch (want " +
                        std::to_string(num_landmarks) + " lines, got " +
                        std::to_string(lines.size()) + ")");

    LandmarkSet set;
    set.height = height;
    set.width = width;
    set.coords.reserve(static_cast<size_t>(num_landmarks));
    for (int i = 0; i < num_landmarks; ++i) {
        auto fields = split(lines[static_cast<size_t>(i)], ',');
        long n = 0;
        double row = 0.0, col = 0.0;
        if (fields.size() != 3 || !parse_long(fields[0], n) ||
            !parse_double(fields[1], row) || !parse_double(fields[2], col))
            throw DataError(path + ": line " + std::to_string(i + 1) +
                            ": want 'n,row,col'");
        if (n != i + 1)
            throw DataError(path + ": line " + std::to_string(i + 1) +
                            ": landmark number " + std::to_string(n) + " out of order");
        set.coords.emplace_back(row, col);
    }
    try {
        set.validate();
    } catch (const std::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    return set;
}

void write_label_csv(const LandmarkSet& set, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot create label file: " + path);
    for (size_t i = 0; i < set.coords.size(); ++i)
        out << i + 1 << "," << fmt_g(set.coords[i].first) << ","
            << fmt_g(set.coords[i].second) << "\n";
    if (!out) throw DataError("label write failed: " + path);
}

// imgNNN plus .png/.pgm/.csv; anything else in a split directory is ignored.
bool parse_img_name(const std::string& fname, std::string& stem, long& number,
                    std::string& ext) {
    size_t dot = fname.rfind('.');
    if (dot == std::string::npos || dot < 4) return false;
    ext = fname.substr(dot + 1);
    if (ext != "png" && ext != "pgm" && ext != "csv") return false;
    stem = fname.substr(0, dot);
    if (stem.rfind("img", 0) != 0) return false;
    std::string digits = stem.substr(3);
    if (digits.empty() ||
        digits.find_first_not_of("0123456789") != std::string::npos)
        return false;
    number = std::strtol(digits.c_str(), nullptr, 10);
    return true;
}

std::vector<SampleRecord> scan_split(const fs::path& split_dir, const DomainSpec& spec) {
    std::vector<SampleRecord> records;
    if (!fs::is_directory(split_dir)) return records;

    struct Entry {
        std::string image;
        std::string label;
    };
    std::map<std::pair<long, std::string>, Entry> entries;
    for (const auto& item : fs::directory_iterator(split_dir)) {
        if (!item.is_regular_file()) continue;
        std::string stem, ext;
        long number = 0;
        if (!parse_img_name(item.path().filename().string(), stem, number, ext)) continue;
        Entry& e = entries[{number, stem}];
        if (ext == "csv") {
            e.label = item.path().string();
        } else {
            if (!e.image.empty())
                throw DataError("ambiguous image (both png and pgm): " +
                                item.path().string());
            e.image = item.path().string();
        }
    }

    for (const auto& [key, e] : entries) {
        if (e.image.empty())
            throw DataError("missing image for label file: " + e.label);
        if (e.label.empty())
            throw DataError("missing label file for image: " + e.image);
        GrayImage img = read_gray(e.image);
        SampleRecord rec;
        rec.image_path = e.image;
        rec.label_path = e.label;
        rec.height = img.height;
        rec.width = img.width;
        rec.landmarks = parse_label_csv(e.label, spec.num_landmarks, img.height, img.width);
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace

DomainSpec parse_domain_cfg(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open domain config: " + path);

    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = trimmed(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw DataError(path + ": line " + std::to_string(line_no) +
                            ": want key=value");
        std::string key = trimmed(t.substr(0, eq));
        std::string value = trimmed(t.substr(eq + 1));
        static const char* known[] = {"name", "num_landmarks", "spacing_rule",
                                      "sdr_thresholds", "id_threshold"};
        if (std::find_if(std::begin(known), std::end(known), [&](const char* k) {
                return key == k;
            }) == std::end(known))
            throw DataError(path + ": unknown key '" + key + "'");
        if (!kv.emplace(key, value).second)
            throw DataError(path + ": duplicate key '" + key + "'");
    }
    for (const char* k : {"name", "num_landmarks", "spacing_rule", "sdr_thresholds",
                          "id_threshold"})
        if (!kv.count(k)) throw DataError(path + ": missing key '" + k + "'");

    DomainSpec spec;
    spec.name = kv["name"];
    long n = 0;
    if (!parse_long(kv["num_landmarks"], n) || n < 1)
        throw DataError(path + ": bad num_landmarks '" + kv["num_landmarks"] + "'");
    spec.num_landmarks = static_cast<int>(n);
    spec.spacing = parse_spacing_rule(kv["spacing_rule"], path);
    for (const std::string& part : split(kv["sdr_thresholds"], ',')) {
        double v = 0.0;
        if (!parse_double(part, v))
            throw DataError(path + ": bad sdr_thresholds entry '" + part + "'");
        spec.sdr_thresholds.push_back(v);
    }
    if (!parse_double(kv["id_threshold"], spec.id_threshold))
        throw DataError(path + ": bad id_threshold '" + kv["id_threshold"] + "'");
    try {
        spec.validate();
    } catch (const std::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    return spec;
}

void write_domain_cfg(const DomainSpec& spec, const std::string& path) {
    spec.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot create domain config: " + path);
    out << "name=" << spec.name << "\n";
    out << "num_landmarks=" << spec.num_landmarks << "\n";
    out << "spacing_rule=" << spacing_rule_text(spec.spacing) << "\n";
    out << "sdr_thresholds=";
    for (size_t i = 0; i < spec.sdr_thresholds.size(); ++i)
        out << (i ? "," : "") << fmt_g(spec.sdr_thresholds[i]);
    out << "\n";
    out << "id_threshold=" << fmt_g(spec.id_threshold) << "\n";
    if (!out) throw DataError("domain config write failed: " + path);
}

DatasetManifest load_dataset(const std::string& domain_dir, const DomainSpec& spec) {
    spec.validate();
    fs::path root(domain_dir);
    if (!fs::is_directory(root))
        throw DataError("domain directory not found: " + domain_dir);

    DatasetManifest manifest;
    manifest.spec = spec;
    manifest.root = domain_dir;
    manifest.train = scan_split(root / "train", spec);
    manifest.val = scan_split(root / "val", spec);
    manifest.test = scan_split(root / "test", spec);
    if (manifest.train.empty() && manifest.val.empty() && manifest.test.empty())
        throw DataError("no samples under " + domain_dir +
                        " (want train/, val/, or test/ with imgNNN files)");
    return manifest;
}

DatasetManifest load_domain(const std::string& domain_dir) {
    fs::path cfg = fs::path(domain_dir) / "domain.cfg";
    return load_dataset(domain_dir, parse_domain_cfg(cfg.string()));
}

std::vector<DatasetManifest> load_root(const std::string& root) {
    if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root);
    std::vector<fs::path> dirs;
    for (const auto& item : fs::directory_iterator(root))
        if (item.is_directory() && fs::is_regular_file(item.path() / "domain.cfg"))
            dirs.push_back(item.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty())
        throw DataError("no domain directories (with domain.cfg) under " + root);

    std::vector<DatasetManifest> manifests;
    for (const auto& dir : dirs) {
        DatasetManifest m = load_domain(dir.string());
        m.spec.id = static_cast<int>(manifests.size());
        manifests.push_back(std::move(m));
    }
    return manifests;
}

template <class T>
Sample<T> load_sample(const SampleRecord& record, int domain_id) {
    GrayImage img = read_gray(record.image_path);
    if (img.height != record.height || img.width != record.width)
        throw DataError("image geometry changed since manifest load: " +
                        record.image_path);
    std::vector<T> values(img.pixels.begin(), img.pixels.end());
    Sample<T> sample;
    sample.image = Tensor<T>::from({img.height, img.width, 1}, std::move(values));
    sample.landmarks = record.landmarks;
    sample.domain_id = domain_id;
    sample.source = record.image_path;
    return sample;
}

template <class T>
Sample<T> resize_sample(const Sample<T>& sample, int out_h, int out_w) {
    const auto& img = sample.image;
    if (img.rank() != 3 || img.dim(2) != 1)
        throw ShapeError("resize_sample: want [H,W,1], got " + shape_str(img.shape()));
    if (sample.landmarks.height != img.dim(0) || sample.landmarks.width != img.dim(1))
        throw ContractError("resize_sample: landmarks disagree with image geometry");
    Sample<T> out;
    auto wide = resize_bilinear(ops::reshape(img, {1, img.dim(0), img.dim(1), 1}),
                                out_h, out_w);
    out.image = ops::reshape(wide, {out_h, out_w, 1});
    out.landmarks = rescale_coords(sample.landmarks, out_h, out_w);
    out.domain_id = sample.domain_id;
    out.source = sample.source;
    return out;
}

template <class T>
LoadedBatch<T> load_batch(const DatasetManifest& manifest, const Batch& batch,
                          int input_h, int input_w) {
    if (batch.indices.empty()) throw ContractError("load_batch: empty batch");
    if (batch.domain != manifest.spec.name)
        throw ContractError("load_batch: batch domain '" + batch.domain +
                            "' does not match manifest '" + manifest.spec.name + "'");
    int b = static_cast<int>(batch.indices.size());
    LoadedBatch<T> out;
    out.domain = batch.domain;
    out.images = Tensor<T>::zeros({b, input_h, input_w, 1});
    out.labels.reserve(batch.indices.size());
    size_t plane = static_cast<size_t>(input_h) * input_w;
    for (int i = 0; i < b; ++i) {
        int idx = batch.indices[static_cast<size_t>(i)];
        if (idx < 0 || idx >= static_cast<int>(manifest.train.size()))
            throw ContractError("load_batch: train index " + std::to_string(idx) +
                                " out of range");
        Sample<T> s = resize_sample(
            load_sample<T>(manifest.train[static_cast<size_t>(idx)], manifest.spec.id),
            input_h, input_w);
        std::memcpy(out.images.values().data() + static_cast<size_t>(i) * plane,
                    s.image.values().data(), plane * sizeof(T));
        out.labels.push_back(std::move(s.landmarks));
    }
    return out;
}

namespace {

// Per-index motif: family cycles disc / plus / ring / X, size steps every
// four indices, orientation advances per index. A solid core at the center
// keeps the labelled pixel itself bright for every family.
double motif_coverage(int k, double dr, double dc) {
    auto clamp01 = [](double t) { return t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t); };
    int family = k % 4;
    int level = std::min(k / 4, 3);
    double r0 = 3.0 + 1.2 * level;
    double d = std::hypot(dr, dc);
    double core = clamp01(2.0 - d);
    double shape = 0.0;
    if (family == 0) {
        shape = clamp01(r0 + 0.5 - d);
    } else if (family == 2) {
        shape = clamp01(1.7 - std::abs(d - r0));
    } else {
        double theta = k * 0.6545 + (family == 3 ? 0.7853981633974483 : 0.0);
        double u = dr * std::cos(theta) + dc * std::sin(theta);
        double v = -dr * std::sin(theta) + dc * std::cos(theta);
        double len = r0 + 1.5;
        auto bar = [&](double a, double b) {
            return std::min(clamp01(len + 0.5 - std::abs(a)),
                            clamp01(1.6 - std::abs(b)));
        };
        shape = std::max(bar(u, v), bar(v, u));
    }
    return std::max(shape, core);
}

constexpr int kMotifMargin = 10;

std::vector<std::pair<int, int>> place_centers(Rng& rng, int n, int size) {
    double sep = 12.0;
    while (sep >= 2.0) {
        std::vector<std::pair<int, int>> centers;
        bool failed = false;
        for (int k = 0; k < n && !failed; ++k) {
            for (int attempt = 0;; ++attempt) {
                if (attempt == 500) {
                    failed = true;
                    break;
                }
                int r = static_cast<int>(rng.uniform_int(kMotifMargin, size - 1 - kMotifMargin));
                int c = static_cast<int>(rng.uniform_int(kMotifMargin, size - 1 - kMotifMargin));
                bool clear = true;
                for (const auto& [pr, pc] : centers)
                    if (std::hypot(double(r - pr), double(c - pc)) < sep) {
                        clear = false;
                        break;
                    }
                if (clear) {
                    centers.emplace_back(r, c);
                    break;
                }
            }
        }
        if (!failed) return centers;
        sep *= 0.8;
    }
    throw DataError("cannot place " + std::to_string(n) + " separated landmarks in a " +
                    std::to_string(size) + "x" + std::to_string(size) + " image");
}

}  // namespace

DatasetManifest gen_synthetic(const std::string& out_root, const DomainSpec& spec,
                              int count, int size, unsigned long long seed) {
    spec.validate();
    if (count < 1) throw ContractError("gen_synthetic: count must be at least 1");
    if (size < 4 * kMotifMargin)
        throw ContractError("gen_synthetic: size must be at least " +
                            std::to_string(4 * kMotifMargin));

    fs::path domain_dir = fs::path(out_root) / spec.name;
    fs::create_directories(domain_dir / "train");
    fs::create_directories(domain_dir / "val");
    fs::create_directories(domain_dir / "test");
    write_domain_cfg(spec, (domain_dir / "domain.cfg").string());

    Rng rng(seed);
    for (int i = 0; i < count; ++i) {
        double base = 0.08 + 0.12 * rng.uniform();
        double grad_amp = 0.05 + 0.10 * rng.uniform();
        double grad_theta = rng.uniform(0.0, 6.283185307179586);
        double gr = std::sin(grad_theta), gc = std::cos(grad_theta);
        auto centers = place_centers(rng, spec.num_landmarks, size);
        std::vector<double> bright(static_cast<size_t>(spec.num_landmarks));
        for (double& v : bright) v = 0.8 + 0.2 * rng.uniform();

        GrayImage img;
        img.height = size;
        img.width = size;
        img.pixels.resize(static_cast<size_t>(size) * size);
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c) {
                double v = base + grad_amp * ((r * gr + c * gc) / size) +
                           0.04 * (2.0 * rng.uniform() - 1.0);
                for (int k = 0; k < spec.num_landmarks; ++k) {
                    double m = motif_coverage(k, r - centers[static_cast<size_t>(k)].first,
                                              c - centers[static_cast<size_t>(k)].second);
                    if (m > 0.0) v = v * (1.0 - m) + bright[static_cast<size_t>(k)] * m;
                }
                v = std::min(1.0, std::max(0.0, v));
                // quantize to the 8-bit grid so write -> read is exact
                img.at(r, c) = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
            }

        LandmarkSet labels;
        labels.height = size;
        labels.width = size;
        for (const auto& [r, c] : centers) labels.coords.emplace_back(double(r), double(c));

        char name[16];
        std::snprintf(name, sizeof name, "img%03d", i);
        write_png(img, (domain_dir / "train" / (std::string(name) + ".png")).string());
        write_label_csv(labels, (domain_dir / "train" / (std::string(name) + ".csv")).string());
    }

    DatasetManifest manifest = load_dataset(domain_dir.string(), spec);
    manifest.spec.id = spec.id;
    return manifest;
}

MixedSampler::MixedSampler(const std::vector<DatasetManifest>& manifests, int batch_size,
                           unsigned long long seed, bool uniform)
    : batch_size_(batch_size), uniform_(uniform), rng_(seed) {
    if (manifests.empty()) throw ContractError("mixed sampler needs at least one manifest");
    if (batch_size < 1) throw ContractError("mixed sampler batch size must be positive");
    for (const auto& m : manifests)
        domains_.emplace_back(m.spec.name, static_cast<int>(m.train.size()));
}

std::vector<Batch> MixedSampler::next_epoch() {
    size_t nd = domains_.size();
    std::vector<std::vector<Batch>> queues(nd);
    std::vector<int> remaining(nd, 0);
    int total = 0;
    for (size_t d = 0; d < nd; ++d) {
        int n = domains_[d].second;
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        rng_.shuffle(order);
        for (int s = 0; s < n; s += batch_size_) {
            int e = std::min(n, s + batch_size_);
            // size-1 remainders break batch norm; dropped unless explicitly
            // sampling singletons
            if (e - s == 1 && batch_size_ > 1) continue;
            Batch batch;
            batch.manifest = static_cast<int>(d);
            batch.domain = domains_[d].first;
            batch.indices.assign(order.begin() + s, order.begin() + e);
            queues[d].push_back(std::move(batch));
        }
        remaining[d] = static_cast<int>(queues[d].size());
        total += remaining[d];
    }

    std::vector<size_t> cursor(nd, 0);
    std::vector<Batch> epoch;
    epoch.reserve(static_cast<size_t>(total));
    while (total > 0) {
        size_t pick = 0;
        if (uniform_) {
            int live = 0;
            for (size_t d = 0; d < nd; ++d) live += remaining[d] > 0;
            auto j = rng_.uniform_int(0, live - 1);
            for (pick = 0; pick < nd; ++pick) {
                if (remaining[pick] == 0) continue;
                if (j == 0) break;
                --j;
            }
        } else {
            auto j = rng_.uniform_int(0, total - 1);
            for (pick = 0; pick < nd; ++pick) {
                if (j < remaining[pick]) break;
                j -= remaining[pick];
            }
        }
        epoch.push_back(std::move(queues[pick][cursor[pick]++]));
        --remaining[pick];
        --total;
    }
    return epoch;
}

#define LMDET_INSTANTIATE_DATASET(T)                                                   \
    template Sample<T> load_sample<T>(const SampleRecord&, int);                       \
    template Sample<T> resize_sample<T>(const Sample<T>&, int, int);                   \
    template LoadedBatch<T> load_batch<T>(const DatasetManifest&, const Batch&, int,   \
                                          int);

LMDET_INSTANTIATE_DATASET(float)
LMDET_INSTANTIATE_DATASET(double)

}  // namespace lmdet
