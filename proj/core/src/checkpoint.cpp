#include "cvl/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace cvl::checkpoint {

namespace {

// Explicit little-endian encoding, independent of host byte order.
void put_u32(std::string & out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u64(std::string & out, uint64_t v) {
    put_u32(out, static_cast<uint32_t>(v & 0xffffffffull));
    put_u32(out, static_cast<uint32_t>(v >> 32));
}

struct reader {
    const std::string & buf;
    size_t pos = 0;
    std::string context;

    void need(size_t n, const std::string & what) {
        check(pos + n <= buf.size(), "checkpoint: truncated file at byte " + std::to_string(pos) +
                                         " while reading " + what + context);
    }
    uint8_t u8(const std::string & what) {
        need(1, what);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint32_t u32(const std::string & what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + static_cast<size_t>(i)]))
                 << (8 * i);
        }
        pos += 4;
        return v;
    }
    uint64_t u64(const std::string & what) {
        const uint64_t lo = u32(what);
        const uint64_t hi = u32(what);
        return lo | (hi << 32);
    }
    std::string bytes(size_t n, const std::string & what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

int64_t entry::numel() const {
    int64_t n = 1;
    for (uint32_t d : dims) {
        n *= static_cast<int64_t>(d);
    }
    return n;
}

void save(const entry_map & entries, const std::string & path) {
    std::string out;
    out += "CVLV";
    put_u32(out, k_version);
    put_u32(out, static_cast<uint32_t>(entries.size()));

    for (const auto & [name, e] : entries) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(e.type));
        put_u32(out, static_cast<uint32_t>(e.dims.size()));
        for (uint32_t d : e.dims) {
            put_u32(out, d);
        }
        if (e.type == dtype::f32) {
            check(static_cast<int64_t>(e.f32_data.size()) == e.numel(),
                  "checkpoint: entry '" + name + "' payload does not match dims");
            for (float v : e.f32_data) {
                uint32_t bits;
                std::memcpy(&bits, &v, 4);
                put_u32(out, bits);
            }
        } else {
            check(static_cast<int64_t>(e.f64_data.size()) == e.numel(),
                  "checkpoint: entry '" + name + "' payload does not match dims");
            for (double v : e.f64_data) {
                uint64_t bits;
                std::memcpy(&bits, &v, 8);
                put_u64(out, bits);
            }
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), "checkpoint: cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    check(f.good(), "checkpoint: write failed for '" + path + "'");
}

entry_map load(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "checkpoint: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    reader r{buf, 0, {}};
    const std::string magic = r.bytes(4, "magic");
    check(magic == "CVLV", "checkpoint: bad magic '" + magic + "' in '" + path + "'");
    const uint32_t version = r.u32("version");
    check(version == k_version, "checkpoint: unknown version " + std::to_string(version) +
                                    " (expected " + std::to_string(k_version) + ")");
    const uint32_t count = r.u32("entry count");

    entry_map out;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.u32("name length");
        const std::string name = r.bytes(name_len, "entry name");
        r.context = " (entry '" + name + "')";

        entry e;
        const uint8_t t = r.u8("dtype");
        check(t <= 1, "checkpoint: entry '" + name + "' has unknown dtype code " +
                          std::to_string(t));
        e.type = static_cast<dtype>(t);
        const uint32_t rank = r.u32("rank");
        check(rank <= 8, "checkpoint: entry '" + name + "' has rank " + std::to_string(rank));
        for (uint32_t d = 0; d < rank; ++d) {
            e.dims.push_back(r.u32("dim"));
        }
        const int64_t n = e.numel();
        if (e.type == dtype::f32) {
            e.f32_data.resize(static_cast<size_t>(n));
            for (int64_t j = 0; j < n; ++j) {
                const uint32_t bits = r.u32("payload");
                std::memcpy(&e.f32_data[static_cast<size_t>(j)], &bits, 4);
            }
        } else {
            e.f64_data.resize(static_cast<size_t>(n));
            for (int64_t j = 0; j < n; ++j) {
                const uint64_t bits = r.u64("payload");
                std::memcpy(&e.f64_data[static_cast<size_t>(j)], &bits, 8);
            }
        }
        check(out.emplace(name, std::move(e)).second,
              "checkpoint: duplicate entry name '" + name + "'");
        r.context.clear();
    }
    check(r.pos == buf.size(), "checkpoint: " + std::to_string(buf.size() - r.pos) +
                                   " trailing bytes after last entry");
    return out;
}

template <typename T>
entry_map to_entries(const named_params<T> & params) {
    entry_map out;
    for (const auto & [name, p] : params.entries) {
        entry e;
        e.type = sizeof(T) == 4 ? dtype::f32 : dtype::f64;
        for (int64_t d : p.value->shape) {
            e.dims.push_back(static_cast<uint32_t>(d));
        }
        if constexpr (sizeof(T) == 4) {
            e.f32_data.assign(p.value->data.begin(), p.value->data.end());
        } else {
            e.f64_data.assign(p.value->data.begin(), p.value->data.end());
        }
        out.emplace(name, std::move(e));
    }
    return out;
}

template <typename T>
void save_params(const named_params<T> & params, const std::string & path) {
    save(to_entries(params), path);
}

template <typename T>
void load_params(named_params<T> & params, const std::string & path) {
    const entry_map loaded = load(path);
    const dtype want = sizeof(T) == 4 ? dtype::f32 : dtype::f64;

    // Validate everything before mutating anything.
    check(loaded.size() == params.entries.size(),
          "checkpoint: file has " + std::to_string(loaded.size()) + " entries, model expects " +
              std::to_string(params.entries.size()));
    for (const auto & [name, p] : params.entries) {
        auto it = loaded.find(name);
        check(it != loaded.end(), "checkpoint: missing entry '" + name + "'");
        check(it->second.type == want, "checkpoint: entry '" + name + "' has wrong scalar type");
        std::vector<int64_t> dims(it->second.dims.begin(), it->second.dims.end());
        check(dims == p.value->shape, "checkpoint: entry '" + name + "' shape " +
                                          shape_str(dims) + " does not match model shape " +
                                          shape_str(p.value->shape));
    }

    for (auto & [name, p] : params.entries) {
        const entry & e = loaded.at(name);
        if constexpr (sizeof(T) == 4) {
            std::copy(e.f32_data.begin(), e.f32_data.end(), p.value->data.begin());
        } else {
            std::copy(e.f64_data.begin(), e.f64_data.end(), p.value->data.begin());
        }
    }
}

uint64_t file_hash(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "file_hash: cannot open '" + path + "'");
    uint64_t h = 0xcbf29ce484222325ull;
    char c;
    while (f.get(c)) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

template entry_map to_entries<float>(const named_params<float> &);
template entry_map to_entries<double>(const named_params<double> &);
template void save_params<float>(const named_params<float> &, const std::string &);
template void save_params<double>(const named_params<double> &, const std::string &);
template void load_params<float>(named_params<float> &, const std::string &);
template void load_params<double>(named_params<double> &, const std::string &);

}  // namespace cvl::checkpoint
