#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "minidub/tensor.hpp"

namespace minidub {

// MDUB little-endian tensor container.
//
// Layout: magic "MDUB", u32 version, u32 record_count, then per record:
//   u32 name_len, name bytes, u32 dtype, u32 rank, u32 dims[rank], payload.
// dtype 0 = float32 (data files: landmarks, envelopes), 1 = float64
// (checkpoints, so save/load round-trips are bit-exact), 2 = u64 (RNG and
// step counters).
class Container {
public:
    enum DType : uint32_t { F32 = 0, F64 = 1, U64 = 2 };

    struct Record {
        DType dtype;
        Shape dims;
        std::vector<double> f;    // for F32/F64
        std::vector<uint64_t> u;  // for U64
    };

    void put_f32(const std::string& name, const Tensor& t);
    void put_f64(const std::string& name, const Tensor& t);
    void put_u64(const std::string& name, const std::vector<uint64_t>& u);

    bool has(const std::string& name) const { return records_.count(name) != 0; }
    Tensor tensor(const std::string& name) const;  // F32/F64 records
    const std::vector<uint64_t>& u64s(const std::string& name) const;
    const std::map<std::string, Record>& records() const { return records_; }

    std::vector<uint8_t> serialize() const;
    void write(const std::string& path) const;
    static Container parse(const std::vector<uint8_t>& bytes);
    static Container read(const std::string& path);

private:
    std::map<std::string, Record> records_;
};

uint64_t fnv1a64(const void* data, size_t n);
uint64_t file_hash(const std::string& path);

}  // namespace minidub
