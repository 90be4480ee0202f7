#include "lmdet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "lmdet/dataset.hpp"
#include "lmdet/errors.hpp"

namespace lmdet {

namespace {

constexpr char kMagic[8] = {'L', 'M', 'D', 'T', 'C', 'K', 'P', 'T'};
constexpr int kFormatVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>(v >> (8 * k)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<unsigned char>(v >> (8 * k)));
}

void put_i64(std::vector<unsigned char>& out, std::int64_t v) {
    put_u64(out, static_cast<std::uint64_t>(v));
}

void put_f64(std::vector<unsigned char>& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

void put_str(std::vector<unsigned char>& out, const std::string& s) {
    put_u64(out, s.size());
    out.insert(out.end(), s.begin(), s.end());
}

void put_raw(std::vector<unsigned char>& out, const void* data, size_t bytes,
             size_t elem_size) {
    size_t at = out.size();
    out.resize(at + bytes);
    if (std::endian::native == std::endian::little || elem_size == 1) {
        std::memcpy(out.data() + at, data, bytes);
    } else {
        const unsigned char* src = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < bytes; i += elem_size)
            for (size_t k = 0; k < elem_size; ++k)
                out[at + i + k] = src[i + elem_size - 1 - k];
    }
}

struct Reader {
    const unsigned char* data;
    size_t size;
    size_t pos = 0;
    std::string path;

    void require(size_t n) const {
        if (pos + n > size) throw DataError("truncated checkpoint: " + path);
    }
    std::uint32_t u32() {
        require(4);
        std::uint32_t v = 0;
        for (int k = 0; k < 4; ++k) v |= std::uint32_t(data[pos + k]) << (8 * k);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        require(8);
        std::uint64_t v = 0;
        for (int k = 0; k < 8; ++k) v |= std::uint64_t(data[pos + k]) << (8 * k);
        pos += 8;
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        std::uint64_t n = u64();
        require(n);
        std::string s(reinterpret_cast<const char*>(data + pos), n);
        pos += n;
        return s;
    }
    void raw(void* dst, size_t bytes, size_t elem_size) {
        require(bytes);
        if (std::endian::native == std::endian::little || elem_size == 1) {
            std::memcpy(dst, data + pos, bytes);
        } else {
            unsigned char* out = static_cast<unsigned char*>(dst);
            for (size_t i = 0; i < bytes; i += elem_size)
                for (size_t k = 0; k < elem_size; ++k)
                    out[i + k] = data[pos + i + elem_size - 1 - k];
        }
        pos += bytes;
    }
};

size_t record_numel(const TensorRecord& rec) {
    size_t n = 1;
    for (int d : rec.shape) n *= static_cast<size_t>(d);
    return n;
}

void put_record(std::vector<unsigned char>& out, const TensorRecord& rec) {
    put_str(out, rec.name);
    put_u32(out, static_cast<std::uint32_t>(rec.shape.size()));
    for (int d : rec.shape) put_u32(out, static_cast<std::uint32_t>(d));
    put_u32(out, static_cast<std::uint32_t>(rec.precision));
    put_u64(out, rec.data.size());
    out.insert(out.end(), rec.data.begin(), rec.data.end());
}

TensorRecord read_record(Reader& in) {
    TensorRecord rec;
    rec.name = in.str();
    std::uint32_t rank = in.u32();
    if (rank > 8) throw DataError("corrupt checkpoint (rank " + std::to_string(rank) +
                                  "): " + in.path);
    for (std::uint32_t i = 0; i < rank; ++i) {
        int d = static_cast<int>(in.u32());
        if (d < 1) throw DataError("corrupt checkpoint (dim " + std::to_string(d) +
                                   " in " + rec.name + "): " + in.path);
        rec.shape.push_back(d);
    }
    rec.precision = static_cast<int>(in.u32());
    if (rec.precision != 4 && rec.precision != 8)
        throw DataError("corrupt checkpoint (precision " +
                        std::to_string(rec.precision) + " in " + rec.name + "): " +
                        in.path);
    std::uint64_t bytes = in.u64();
    if (bytes != record_numel(rec) * static_cast<size_t>(rec.precision))
        throw DataError("corrupt checkpoint (byte count of " + rec.name + "): " +
                        in.path);
    rec.data.resize(bytes);
    in.raw(rec.data.data(), bytes, 1);
    return rec;
}

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            size_t used = 0;
            out.push_back(std::stoi(part, &used));
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw DataError("checkpoint arch header: bad " + key + " entry '" + part + "'");
        }
    }
    return out;
}

double parse_num(const std::string& s, const std::string& key) {
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || !std::isfinite(v))
        throw DataError("checkpoint arch header: bad " + key + " '" + s + "'");
    return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::vector<unsigned char> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u32(out, static_cast<std::uint32_t>(ckpt.format_version));
    put_str(out, ckpt.arch_text);
    put_u64(out, ckpt.params.size());
    for (const auto& rec : ckpt.params) put_record(out, rec);
    put_u64(out, ckpt.buffers.size());
    for (const auto& rec : ckpt.buffers) put_record(out, rec);
    put_u64(out, ckpt.adam.size());
    for (const auto& [name, slot] : ckpt.adam) {
        put_str(out, name);
        put_i64(out, slot.t);
        if (slot.m.size() != slot.v.size())
            throw ContractError("adam slot " + name + " has mismatched moment sizes");
        put_u64(out, slot.m.size());
        put_raw(out, slot.m.data(), slot.m.size() * 8, 8);
        put_raw(out, slot.v.data(), slot.v.size() * 8, 8);
    }
    put_i64(out, ckpt.step);
    put_u32(out, static_cast<std::uint32_t>(ckpt.epoch));
    put_f64(out, ckpt.best_val_loss);
    put_str(out, ckpt.sampler_state);

    std::ofstream file(path, std::ios::binary);
    if (!file) throw DataError("cannot create checkpoint: " + path);
    file.write(reinterpret_cast<const char*>(out.data()),
               static_cast<std::streamsize>(out.size()));
    if (!file) throw DataError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw DataError("cannot open checkpoint: " + path);
    std::stringstream ss;
    ss << file.rdbuf();
    std::string bytes = ss.str();

    Reader in{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), 0, path};
    in.require(8);
    if (std::memcmp(in.data, kMagic, 8) != 0)
        throw DataError("not a checkpoint (bad magic): " + path);
    in.pos = 8;

    Checkpoint ckpt;
    ckpt.format_version = static_cast<int>(in.u32());
    if (ckpt.format_version != kFormatVersion)
        throw DataError("unsupported checkpoint format version " +
                        std::to_string(ckpt.format_version) + ": " + path);
    ckpt.arch_text = in.str();
    for (std::uint64_t i = 0, n = in.u64(); i < n; ++i)
        ckpt.params.push_back(read_record(in));
    for (std::uint64_t i = 0, n = in.u64(); i < n; ++i)
        ckpt.buffers.push_back(read_record(in));
    for (std::uint64_t i = 0, n = in.u64(); i < n; ++i) {
        std::string name = in.str();
        AdamSlot slot;
        slot.t = in.i64();
        std::uint64_t len = in.u64();
        in.require(len * 16);
        slot.m.resize(len);
        slot.v.resize(len);
        in.raw(slot.m.data(), len * 8, 8);
        in.raw(slot.v.data(), len * 8, 8);
        ckpt.adam.emplace(std::move(name), std::move(slot));
    }
    ckpt.step = in.i64();
    ckpt.epoch = static_cast<int>(in.u32());
    ckpt.best_val_loss = in.f64();
    ckpt.sampler_state = in.str();
    if (in.pos != in.size)
        throw DataError("trailing bytes after checkpoint payload: " + path);
    return ckpt;
}

template <class T>
void capture_params(const ParamStore<T>& store, Checkpoint& ckpt) {
    ckpt.params.clear();
    ckpt.buffers.clear();
    auto capture = [](const typename ParamStore<T>::Entry& entry) {
        TensorRecord rec;
        rec.name = entry.name;
        rec.shape = entry.tensor.shape();
        rec.precision = static_cast<int>(sizeof(T));
        rec.data.reserve(entry.tensor.size() * sizeof(T));
        put_raw(rec.data, entry.tensor.values().data(), entry.tensor.size() * sizeof(T),
                sizeof(T));
        return rec;
    };
    for (const auto& entry : store.params()) ckpt.params.push_back(capture(entry));
    for (const auto& entry : store.buffers()) ckpt.buffers.push_back(capture(entry));
}

template <class T>
void restore_params(const Checkpoint& ckpt, ParamStore<T>& store) {
    auto restore = [](const std::vector<TensorRecord>& records,
                      std::vector<typename ParamStore<T>::Entry>& entries,
                      const char* kind) {
        std::map<std::string, const TensorRecord*> by_name;
        for (const auto& rec : records)
            if (!by_name.emplace(rec.name, &rec).second)
                throw DataError(std::string("checkpoint lists ") + kind + " '" +
                                rec.name + "' twice");
        if (by_name.size() != entries.size())
            throw DataError(std::string("checkpoint carries ") +
                            std::to_string(by_name.size()) + " " + kind +
                            " records, the network has " +
                            std::to_string(entries.size()));
        for (auto& entry : entries) {
            auto it = by_name.find(entry.name);
            if (it == by_name.end())
                throw DataError(std::string("checkpoint is missing ") + kind + " '" +
                                entry.name + "'");
            const TensorRecord& rec = *it->second;
            if (rec.precision != static_cast<int>(sizeof(T)))
                throw DataError("checkpoint stores " + std::to_string(rec.precision) +
                                "-byte values for '" + entry.name + "', the network uses " +
                                std::to_string(sizeof(T)) + "-byte values");
            if (!shape_eq(rec.shape, entry.tensor.shape()))
                throw DataError("checkpoint shape " + shape_str(rec.shape) + " for '" +
                                entry.name + "' does not match network shape " +
                                shape_str(entry.tensor.shape()));
            Reader in{rec.data.data(), rec.data.size(), 0, entry.name};
            in.raw(entry.tensor.values().data(), rec.data.size(), sizeof(T));
        }
    };
    restore(ckpt.params, store.params(), "parameter");
    restore(ckpt.buffers, store.buffers(), "buffer");
}

std::string arch_text(const NetworkConfig& cfg, const std::vector<DomainSpec>& domains,
                      int input_size) {
    cfg.validate();
    std::string out;
    out += "arch=1\n";
    out += "patch=" + std::to_string(cfg.encoder.patch_size) + "\n";
    out += "embed_dim=" + std::to_string(cfg.encoder.embed_dim) + "\n";
    out += "depths=" + join_ints(cfg.encoder.depths) + "\n";
    out += "heads=" + join_ints(cfg.encoder.heads) + "\n";
    out += "window=" + std::to_string(cfg.encoder.window) + "\n";
    out += "in_channels=" + std::to_string(cfg.encoder.in_channels) + "\n";
    out += "mlp_ratio=" + std::to_string(cfg.encoder.mlp_ratio) + "\n";
    out += "guidance_width=" + std::to_string(cfg.guidance_width) + "\n";
    out += "sigma=" + fmt_g(cfg.sigma) + "\n";
    out += "input=" + std::to_string(input_size) + "\n";
    for (const auto& spec : domains) {
        spec.validate();
        if (spec.name.find('|') != std::string::npos ||
            spec.name.find('\n') != std::string::npos)
            throw ContractError("domain name '" + spec.name +
                                "' cannot appear in an arch header");
        out += "domain=" + spec.name + "|" + std::to_string(spec.num_landmarks) + "|" +
               spacing_rule_text(spec.spacing) + "|";
        for (size_t i = 0; i < spec.sdr_thresholds.size(); ++i)
            out += (i ? "," : "") + fmt_g(spec.sdr_thresholds[i]);
        out += "|" + fmt_g(spec.id_threshold) + "\n";
    }
    return out;
}

ArchInfo parse_arch_text(const std::string& text) {
    ArchInfo info;
    std::set<std::string> seen;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError("checkpoint arch header: bad line '" + line + "'");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        if (key != "domain" && !seen.insert(key).second)
            throw DataError("checkpoint arch header: duplicate key '" + key + "'");
        if (key == "arch") {
            if (value != "1")
                throw DataError("checkpoint arch header: unsupported arch version '" +
                                value + "'");
        } else if (key == "patch") {
            info.net.encoder.patch_size = static_cast<int>(parse_num(value, key));
        } else if (key == "embed_dim") {
            info.net.encoder.embed_dim = static_cast<int>(parse_num(value, key));
        } else if (key == "depths") {
            info.net.encoder.depths = parse_int_list(value, key);
        } else if (key == "heads") {
            info.net.encoder.heads = parse_int_list(value, key);
        } else if (key == "window") {
            info.net.encoder.window = static_cast<int>(parse_num(value, key));
        } else if (key == "in_channels") {
            info.net.encoder.in_channels = static_cast<int>(parse_num(value, key));
        } else if (key == "mlp_ratio") {
            info.net.encoder.mlp_ratio = static_cast<int>(parse_num(value, key));
        } else if (key == "guidance_width") {
            info.net.guidance_width = static_cast<int>(parse_num(value, key));
        } else if (key == "sigma") {
            info.net.sigma = parse_num(value, key);
        } else if (key == "input") {
            info.input_size = static_cast<int>(parse_num(value, key));
        } else if (key == "domain") {
            std::vector<std::string> parts;
            std::stringstream ps(value);
            std::string part;
            while (std::getline(ps, part, '|')) parts.push_back(part);
            if (parts.size() != 5)
                throw DataError("checkpoint arch header: bad domain line '" + value + "'");
            DomainSpec spec;
            spec.name = parts[0];
            spec.id = static_cast<int>(info.domains.size());
            spec.num_landmarks = static_cast<int>(parse_num(parts[1], "num_landmarks"));
            spec.spacing = parse_spacing_rule(parts[2], "checkpoint arch header");
            std::stringstream ts(parts[3]);
            while (std::getline(ts, part, ','))
                spec.sdr_thresholds.push_back(parse_num(part, "sdr_thresholds"));
            spec.id_threshold = parse_num(parts[4], "id_threshold");
            info.domains.push_back(std::move(spec));
        } else {
            throw DataError("checkpoint arch header: unknown key '" + key + "'");
        }
    }
    for (const char* key : {"arch", "patch", "embed_dim", "depths", "heads", "window",
                            "in_channels", "mlp_ratio", "guidance_width", "sigma",
                            "input"})
        if (!seen.count(key))
            throw DataError(std::string("checkpoint arch header: missing key '") + key +
                            "'");
    if (info.domains.empty())
        throw DataError("checkpoint arch header: no domains");
    info.net.encoder.domains.clear();
    for (const auto& spec : info.domains) {
        spec.validate();
        info.net.encoder.domains.push_back(spec.name);
    }
    info.net.validate();
    return info;
}

template void capture_params<float>(const ParamStore<float>&, Checkpoint&);
template void capture_params<double>(const ParamStore<double>&, Checkpoint&);
template void restore_params<float>(const Checkpoint&, ParamStore<float>&);
template void restore_params<double>(const Checkpoint&, ParamStore<double>&);

}  // namespace lmdet
