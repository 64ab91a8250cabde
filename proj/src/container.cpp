#include "minidub/container.hpp"

#include <cstring>
#include <fstream>

namespace minidub {

namespace {

constexpr uint32_t kVersion = 1;

void push_u32(std::vector<uint8_t>& out, uint32_t x) {
    out.push_back((uint8_t)(x & 0xff));
    out.push_back((uint8_t)((x >> 8) & 0xff));
    out.push_back((uint8_t)((x >> 16) & 0xff));
    out.push_back((uint8_t)((x >> 24) & 0xff));
}

void push_u64(std::vector<uint8_t>& out, uint64_t x) {
    for (int i = 0; i < 8; ++i) out.push_back((uint8_t)((x >> (8 * i)) & 0xff));
}

struct Cursor {
    const std::vector<uint8_t>& b;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > b.size()) throw DataError("MDUB container truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t x = (uint32_t)b[pos] | ((uint32_t)b[pos + 1] << 8) | ((uint32_t)b[pos + 2] << 16) |
                     ((uint32_t)b[pos + 3] << 24);
        pos += 4;
        return x;
    }
    uint64_t u64() {
        need(8);
        uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= (uint64_t)b[pos + i] << (8 * i);
        pos += 8;
        return x;
    }
};

}  // namespace

void Container::put_f32(const std::string& name, const Tensor& t) {
    Record r;
    r.dtype = F32;
    r.dims = t.shape;
    r.f = t.v;
    records_[name] = std::move(r);
}

void Container::put_f64(const std::string& name, const Tensor& t) {
    Record r;
    r.dtype = F64;
    r.dims = t.shape;
    r.f = t.v;
    records_[name] = std::move(r);
}

void Container::put_u64(const std::string& name, const std::vector<uint64_t>& u) {
    Record r;
    r.dtype = U64;
    r.dims = {(int)u.size()};
    r.u = u;
    records_[name] = std::move(r);
}

Tensor Container::tensor(const std::string& name) const {
    auto it = records_.find(name);
    if (it == records_.end()) throw DataError("MDUB record not found: " + name);
    if (it->second.dtype == U64) throw DataError("MDUB record is u64, not tensor: " + name);
    Tensor t(it->second.dims);
    t.v = it->second.f;
    if (it->second.dtype == F32) {
        // stored quantized to f32; round-trip through float for parity with disk
        for (auto& x : t.v) x = (double)(float)x;
    }
    return t;
}

const std::vector<uint64_t>& Container::u64s(const std::string& name) const {
    auto it = records_.find(name);
    if (it == records_.end() || it->second.dtype != U64)
        throw DataError("MDUB u64 record not found: " + name);
    return it->second.u;
}

std::vector<uint8_t> Container::serialize() const {
    std::vector<uint8_t> out;
    out.insert(out.end(), {'M', 'D', 'U', 'B'});
    push_u32(out, kVersion);
    push_u32(out, (uint32_t)records_.size());
    for (const auto& [name, r] : records_) {
        push_u32(out, (uint32_t)name.size());
        out.insert(out.end(), name.begin(), name.end());
        push_u32(out, (uint32_t)r.dtype);
        push_u32(out, (uint32_t)r.dims.size());
        for (int d : r.dims) push_u32(out, (uint32_t)d);
        if (r.dtype == F32) {
            for (double x : r.f) {
                float f = (float)x;
                uint32_t bits;
                std::memcpy(&bits, &f, 4);
                push_u32(out, bits);
            }
        } else if (r.dtype == F64) {
            for (double x : r.f) {
                uint64_t bits;
                std::memcpy(&bits, &x, 8);
                push_u64(out, bits);
            }
        } else {
            for (uint64_t x : r.u) push_u64(out, x);
        }
    }
    return out;
}

void Container::write(const std::string& path) const {
    auto bytes = serialize();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    f.write((const char*)bytes.data(), (std::streamsize)bytes.size());
    if (!f) throw DataError("short write to " + path);
}

Container Container::parse(const std::vector<uint8_t>& bytes) {
    Cursor c{bytes};
    c.need(4);
    if (std::memcmp(bytes.data(), "MDUB", 4) != 0) throw DataError("bad MDUB magic");
    c.pos = 4;
    uint32_t version = c.u32();
    if (version != kVersion) throw DataError("unsupported MDUB version " + std::to_string(version));
    uint32_t count = c.u32();
    Container out;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = c.u32();
        c.need(name_len);
        std::string name((const char*)bytes.data() + c.pos, name_len);
        c.pos += name_len;
        Record r;
        uint32_t dtype = c.u32();
        if (dtype > U64) throw DataError("bad MDUB dtype");
        r.dtype = (DType)dtype;
        uint32_t rank = c.u32();
        int64_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            uint32_t dim = c.u32();
            r.dims.push_back((int)dim);
            n *= dim;
        }
        if (r.dtype == F32) {
            r.f.resize(n);
            for (int64_t k = 0; k < n; ++k) {
                uint32_t bits = c.u32();
                float f;
                std::memcpy(&f, &bits, 4);
                r.f[k] = (double)f;
            }
        } else if (r.dtype == F64) {
            r.f.resize(n);
            for (int64_t k = 0; k < n; ++k) {
                uint64_t bits = c.u64();
                double x;
                std::memcpy(&x, &bits, 8);
                r.f[k] = x;
            }
        } else {
            r.u.resize(n);
            for (int64_t k = 0; k < n; ++k) r.u[k] = c.u64();
        }
        out.records_[name] = std::move(r);
    }
    return out;
}

Container Container::read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(bytes);
}

uint64_t fnv1a64(const void* data, size_t n) {
    const uint8_t* p = (const uint8_t*)data;
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace minidub
