#include "fastslow/checkpoint.hpp"

#include <cstring>

#include "fastslow/fileio.hpp"
#include "fastslow/rng.hpp"

namespace fastslow {

namespace {

constexpr char kMagic[] = "FSCKPT1";
constexpr size_t kMagicLen = 7;

template <class T>
void append_pod(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <class T>
T read_pod(const std::string& buf, size_t& off, const std::string& path) {
    if (off + sizeof(T) > buf.size())
        throw DataError("checkpoint '" + path + "': truncated file");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void ParamStore::add(const std::string& name, Tensor t) {
    if (has(name)) throw UsageError("parameter '" + name + "' already present");
    t.tape = nullptr;
    t.node = -1;
    pos_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = pos_.find(name);
    if (it == pos_.end()) throw UsageError("unknown parameter '" + name + "'");
    return items_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = pos_.find(name);
    if (it == pos_.end()) throw UsageError("unknown parameter '" + name + "'");
    return items_[it->second].second;
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
}

void save_checkpoint(const ParamStore& store, const std::string& path) {
    std::string buf;
    buf.append(kMagic, kMagicLen);
    append_pod<uint64_t>(buf, store.size());
    uint64_t checksum = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : store.items()) {
        append_pod<uint32_t>(buf, static_cast<uint32_t>(name.size()));
        buf.append(name);
        append_pod<uint32_t>(buf, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) append_pod<int64_t>(buf, d);
        size_t payload_at = buf.size();
        for (double v : t.data) append_pod<double>(buf, v);
        checksum = fnv1a64(buf.data() + payload_at, buf.size() - payload_at, checksum);
    }
    append_pod<uint64_t>(buf, checksum);
    atomic_write_text(path, buf);
}

ParamStore load_checkpoint(const std::string& path) {
    std::string buf = read_text(path);
    if (buf.size() < kMagicLen + sizeof(uint64_t) ||
        std::memcmp(buf.data(), kMagic, kMagicLen) != 0)
        throw DataError("checkpoint '" + path + "': missing FSCKPT1 magic");
    size_t off = kMagicLen;
    uint64_t count = read_pod<uint64_t>(buf, off, path);
    ParamStore store;
    uint64_t checksum = 0xcbf29ce484222325ULL;
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t name_len = read_pod<uint32_t>(buf, off, path);
        if (off + name_len > buf.size())
            throw DataError("checkpoint '" + path + "': truncated name");
        std::string name(buf.data() + off, name_len);
        off += name_len;
        uint32_t ndim = read_pod<uint32_t>(buf, off, path);
        if (ndim > 8) throw DataError("checkpoint '" + path + "': implausible rank for '" +
                                      name + "'");
        Shape shape;
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            int64_t dim = read_pod<int64_t>(buf, off, path);
            if (dim <= 0 || dim > (1LL << 32))
                throw DataError("checkpoint '" + path + "': bad dimension in '" + name + "'");
            shape.push_back(dim);
            numel *= dim;
        }
        if (off + static_cast<size_t>(numel) * sizeof(double) > buf.size())
            throw DataError("checkpoint '" + path + "': truncated payload for '" + name + "'");
        checksum = fnv1a64(buf.data() + off, static_cast<size_t>(numel) * sizeof(double),
                           checksum);
        std::vector<double> data(static_cast<size_t>(numel));
        std::memcpy(data.data(), buf.data() + off, static_cast<size_t>(numel) * sizeof(double));
        off += static_cast<size_t>(numel) * sizeof(double);
        try {
            store.add(name, Tensor::from_data(std::move(shape), std::move(data)));
        } catch (const NumericError&) {
            throw DataError("checkpoint '" + path + "': non-finite values in '" + name + "'");
        }
    }
    uint64_t stored = read_pod<uint64_t>(buf, off, path);
    if (off != buf.size())
        throw DataError("checkpoint '" + path + "': trailing bytes after checksum");
    if (stored != checksum)
        throw DataError("checkpoint '" + path + "': checksum mismatch (file corrupt)");
    return store;
}

}  // namespace fastslow
