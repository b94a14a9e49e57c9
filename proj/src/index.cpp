#include "fastslow/index.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "fastslow/fileio.hpp"
#include "fastslow/rng.hpp"

namespace fastslow {

namespace {

constexpr char kIdxMagic[] = "FSIDX1";
constexpr size_t kIdxMagicLen = 6;

template <class T>
void append_pod(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <class T>
T read_pod(const std::string& buf, size_t& off, const std::string& path) {
    if (off + sizeof(T) > buf.size())
        throw DataError("index '" + path + "': truncated file");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

std::vector<float> narrow_query(const Tensor& query, int64_t dim) {
    if (query.shape.size() != 1 || query.shape[0] != dim)
        throw UsageError("query dimension does not match the index (" +
                         std::to_string(query.shape.size() == 1 ? query.shape[0] : -1) +
                         " vs " + std::to_string(dim) + ")");
    std::vector<float> q(query.data.size());
    for (size_t i = 0; i < q.size(); ++i) q[i] = static_cast<float>(query.data[i]);
    return q;
}

void check_k(int64_t k, int64_t n) {
    if (k < 0) throw UsageError("k must be non-negative");
    if (k > n)
        throw UsageError("k = " + std::to_string(k) + " exceeds the index size " +
                         std::to_string(n));
}

RankedList take_topk(std::vector<ScoredItem>&& all, int64_t k) {
    auto better = [](const ScoredItem& a, const ScoredItem& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.scene_id < b.scene_id;
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<size_t>(k), all.end(), better);
    all.resize(static_cast<size_t>(k));
    return std::move(all);
}

void validate_ids(const std::vector<int64_t>& ids) {
    std::unordered_set<int64_t> seen;
    for (int64_t id : ids)
        if (!seen.insert(id).second)
            throw DataError("duplicate scene id " + std::to_string(id) + " in the index");
}

}  // namespace

ExactIndex build_exact(const CorpusEmbeddings& emb) {
    if (emb.dim <= 0) throw UsageError("embedding dimension must be positive");
    if (emb.rows.size() != emb.scene_ids.size() * static_cast<size_t>(emb.dim))
        throw UsageError("embedding row storage does not match count x dim");
    validate_ids(emb.scene_ids);
    for (float v : emb.rows)
        if (!std::isfinite(v)) throw DataError("index rows must be finite");
    return ExactIndex{emb.dim, emb.scene_ids, emb.rows};
}

RankedList topk_exact(const ExactIndex& idx, const Tensor& query, int64_t k) {
    check_k(k, idx.count());
    std::vector<float> q = narrow_query(query, idx.dim);
    std::vector<ScoredItem> all;
    all.reserve(static_cast<size_t>(idx.count()));
    for (int64_t i = 0; i < idx.count(); ++i) {
        const float* row = idx.rows.data() + static_cast<size_t>(i * idx.dim);
        float acc = 0.0f;
        for (int64_t d = 0; d < idx.dim; ++d)
            acc += q[static_cast<size_t>(d)] * row[d];
        all.push_back({idx.scene_ids[static_cast<size_t>(i)], static_cast<double>(acc)});
    }
    return take_topk(std::move(all), k);
}

PQCodebooks train_pq(const CorpusEmbeddings& emb, int m, int kc, int iters, uint64_t seed) {
    if (emb.dim <= 0) throw UsageError("embedding dimension must be positive");
    if (m < 1 || emb.dim % m != 0)
        throw UsageError("sub-space count " + std::to_string(m) +
                         " must divide the dimension " + std::to_string(emb.dim));
    if (kc < 1) throw UsageError("centroid count must be at least 1");
    if (kc > 256) throw UsageError("codebook budget is 256 centroids per sub-space");
    const int64_t n = static_cast<int64_t>(emb.scene_ids.size());
    if (n < kc)
        throw UsageError("cannot train " + std::to_string(kc) + " centroids from " +
                         std::to_string(n) + " vectors");
    if (iters < 0) throw UsageError("negative iteration count");

    const int64_t dsub = emb.dim / m;
    PQCodebooks books;
    books.m = m;
    books.kc = kc;
    books.dsub = dsub;
    books.centroids.resize(static_cast<size_t>(m) * static_cast<size_t>(kc) *
                           static_cast<size_t>(dsub));
    books.mean_error.resize(static_cast<size_t>(m));
    books.error_per_iter.resize(static_cast<size_t>(m));

    Rng root(seed);
    for (int sub = 0; sub < m; ++sub) {
        Rng rng = root.child(static_cast<uint64_t>(sub));
        auto point = [&](int64_t i) {
            return emb.rows.data() + static_cast<size_t>(i * emb.dim + sub * dsub);
        };
        auto dist2 = [&](const float* x, const double* c) {
            double s = 0.0;
            for (int64_t d = 0; d < dsub; ++d) {
                double diff = static_cast<double>(x[d]) - c[d];
                s += diff * diff;
            }
            return s;
        };

        // distance-weighted seeding: each new centroid is drawn with
        // probability proportional to the squared distance to the nearest
        // centroid chosen so far
        std::vector<double> centroids(static_cast<size_t>(kc) * static_cast<size_t>(dsub));
        auto centroid = [&](int c) { return centroids.data() + static_cast<size_t>(c) * static_cast<size_t>(dsub); };
        int64_t first = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n)));
        for (int64_t d = 0; d < dsub; ++d)
            centroid(0)[d] = static_cast<double>(point(first)[d]);
        std::vector<double> best(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) best[static_cast<size_t>(i)] = dist2(point(i), centroid(0));
        for (int c = 1; c < kc; ++c) {
            double total = 0.0;
            for (double v : best) total += v;
            int64_t pick;
            if (total > 0.0) {
                double u = rng.uniform() * total;
                double run = 0.0;
                pick = n - 1;
                for (int64_t i = 0; i < n; ++i) {
                    run += best[static_cast<size_t>(i)];
                    if (u < run) {
                        pick = i;
                        break;
                    }
                }
            } else {
                // every point already sits on a centroid
                pick = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n)));
            }
            for (int64_t d = 0; d < dsub; ++d)
                centroid(c)[d] = static_cast<double>(point(pick)[d]);
            for (int64_t i = 0; i < n; ++i)
                best[static_cast<size_t>(i)] =
                    std::min(best[static_cast<size_t>(i)], dist2(point(i), centroid(c)));
        }

        std::vector<int> assign(static_cast<size_t>(n));
        auto assignment_error = [&]() {
            double total = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                double bestd = dist2(point(i), centroid(0));
                int bestc = 0;
                for (int c = 1; c < kc; ++c) {
                    double d = dist2(point(i), centroid(c));
                    if (d < bestd) {
                        bestd = d;
                        bestc = c;
                    }
                }
                assign[static_cast<size_t>(i)] = bestc;
                total += bestd;
            }
            return total / static_cast<double>(n);
        };

        std::vector<double>& trace = books.error_per_iter[static_cast<size_t>(sub)];
        trace.push_back(assignment_error());
        for (int it = 0; it < iters; ++it) {
            std::vector<double> sums(static_cast<size_t>(kc) * static_cast<size_t>(dsub), 0.0);
            std::vector<int64_t> counts(static_cast<size_t>(kc), 0);
            for (int64_t i = 0; i < n; ++i) {
                int c = assign[static_cast<size_t>(i)];
                ++counts[static_cast<size_t>(c)];
                const float* x = point(i);
                double* dst = sums.data() + static_cast<size_t>(c) * static_cast<size_t>(dsub);
                for (int64_t d = 0; d < dsub; ++d) dst[d] += static_cast<double>(x[d]);
            }
            for (int c = 0; c < kc; ++c) {
                if (counts[static_cast<size_t>(c)] == 0) continue;  // keep the previous centroid
                double inv = 1.0 / static_cast<double>(counts[static_cast<size_t>(c)]);
                for (int64_t d = 0; d < dsub; ++d)
                    centroid(c)[d] =
                        sums[static_cast<size_t>(c) * static_cast<size_t>(dsub) +
                             static_cast<size_t>(d)] *
                        inv;
            }
            double err = assignment_error();
            if (err > trace.back() * (1.0 + 1e-12) + 1e-12)
                throw NumericError("quantization error increased between iterations (" +
                                   std::to_string(trace.back()) + " -> " +
                                   std::to_string(err) + ")");
            trace.push_back(err);
        }
        books.mean_error[static_cast<size_t>(sub)] = trace.back();

        float* out = books.centroids.data() +
                     static_cast<size_t>(sub) * static_cast<size_t>(kc) *
                         static_cast<size_t>(dsub);
        for (size_t i = 0; i < centroids.size(); ++i) out[i] = static_cast<float>(centroids[i]);
    }
    return books;
}

PQIndex build_pq(const CorpusEmbeddings& emb, const PQCodebooks& books) {
    if (books.m < 1 || books.kc < 1 || books.dsub < 1)
        throw UsageError("empty codebooks");
    if (emb.dim != books.m * books.dsub)
        throw UsageError("codebooks cover dimension " +
                         std::to_string(books.m * books.dsub) + ", embeddings have " +
                         std::to_string(emb.dim));
    if (emb.rows.size() != emb.scene_ids.size() * static_cast<size_t>(emb.dim))
        throw UsageError("embedding row storage does not match count x dim");
    validate_ids(emb.scene_ids);

    PQIndex idx;
    idx.dim = emb.dim;
    idx.m = books.m;
    idx.kc = books.kc;
    idx.dsub = books.dsub;
    idx.scene_ids = emb.scene_ids;
    idx.centroids = books.centroids;
    const int64_t n = idx.count();
    idx.codes.resize(static_cast<size_t>(n) * static_cast<size_t>(idx.m));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t sub = 0; sub < idx.m; ++sub) {
            const float* x = emb.rows.data() + static_cast<size_t>(i * emb.dim + sub * idx.dsub);
            const float* cents = idx.centroids.data() +
                                 static_cast<size_t>(sub) * static_cast<size_t>(idx.kc) *
                                     static_cast<size_t>(idx.dsub);
            double bestd = 0.0;
            int best = -1;
            for (int64_t c = 0; c < idx.kc; ++c) {
                const float* ctr = cents + static_cast<size_t>(c) * static_cast<size_t>(idx.dsub);
                double d = 0.0;
                for (int64_t k = 0; k < idx.dsub; ++k) {
                    double diff = static_cast<double>(x[k]) - static_cast<double>(ctr[k]);
                    d += diff * diff;
                }
                if (best < 0 || d < bestd) {
                    bestd = d;
                    best = static_cast<int>(c);
                }
            }
            idx.codes[static_cast<size_t>(i * idx.m + sub)] = static_cast<uint8_t>(best);
        }
    }
    return idx;
}

RankedList topk_pq(const PQIndex& idx, const Tensor& query, int64_t k, PQQueryStats* stats) {
    check_k(k, idx.count());
    std::vector<float> q = narrow_query(query, idx.dim);

    // asymmetric scoring: per-sub-space inner products with every centroid,
    // then each item sums its code's table entries
    std::vector<float> table(static_cast<size_t>(idx.m) * static_cast<size_t>(idx.kc));
    for (int64_t sub = 0; sub < idx.m; ++sub) {
        const float* qs = q.data() + static_cast<size_t>(sub * idx.dsub);
        for (int64_t c = 0; c < idx.kc; ++c) {
            const float* ctr = idx.centroids.data() +
                               (static_cast<size_t>(sub) * static_cast<size_t>(idx.kc) +
                                static_cast<size_t>(c)) *
                                   static_cast<size_t>(idx.dsub);
            float acc = 0.0f;
            for (int64_t d = 0; d < idx.dsub; ++d) acc += qs[d] * ctr[d];
            table[static_cast<size_t>(sub * idx.kc + c)] = acc;
            if (stats) ++stats->table_dots;
        }
    }

    std::vector<ScoredItem> all;
    all.reserve(static_cast<size_t>(idx.count()));
    for (int64_t i = 0; i < idx.count(); ++i) {
        const uint8_t* code = idx.codes.data() + static_cast<size_t>(i * idx.m);
        double s = 0.0;
        for (int64_t sub = 0; sub < idx.m; ++sub) {
            s += static_cast<double>(table[static_cast<size_t>(sub * idx.kc + code[sub])]);
            if (stats) ++stats->code_lookups;
        }
        all.push_back({idx.scene_ids[static_cast<size_t>(i)], s});
    }
    return take_topk(std::move(all), k);
}

std::vector<float> reconstruct_pq(const PQIndex& idx, int64_t item) {
    if (item < 0 || item >= idx.count())
        throw UsageError("item " + std::to_string(item) + " outside the index");
    std::vector<float> out(static_cast<size_t>(idx.dim));
    const uint8_t* code = idx.codes.data() + static_cast<size_t>(item * idx.m);
    for (int64_t sub = 0; sub < idx.m; ++sub) {
        const float* ctr = idx.centroids.data() +
                           (static_cast<size_t>(sub) * static_cast<size_t>(idx.kc) +
                            static_cast<size_t>(code[sub])) *
                               static_cast<size_t>(idx.dsub);
        std::memcpy(out.data() + static_cast<size_t>(sub * idx.dsub), ctr,
                    static_cast<size_t>(idx.dsub) * sizeof(float));
    }
    return out;
}

void save_exact_index(const ExactIndex& idx, const std::string& path) {
    std::string buf;
    buf.append(kIdxMagic, kIdxMagicLen);
    append_pod<uint8_t>(buf, static_cast<uint8_t>(IndexKind::exact));
    append_pod<uint64_t>(buf, static_cast<uint64_t>(idx.count()));
    append_pod<uint64_t>(buf, static_cast<uint64_t>(idx.dim));
    for (int64_t id : idx.scene_ids) append_pod<int64_t>(buf, id);
    for (float v : idx.rows) append_pod<float>(buf, v);
    append_pod<uint64_t>(buf, fnv1a64(buf.data() + kIdxMagicLen, buf.size() - kIdxMagicLen));
    atomic_write_text(path, buf);
}

void save_pq_index(const PQIndex& idx, const std::string& path) {
    std::string buf;
    buf.append(kIdxMagic, kIdxMagicLen);
    append_pod<uint8_t>(buf, static_cast<uint8_t>(IndexKind::pq));
    append_pod<uint64_t>(buf, static_cast<uint64_t>(idx.count()));
    append_pod<uint64_t>(buf, static_cast<uint64_t>(idx.dim));
    append_pod<uint64_t>(buf, static_cast<uint64_t>(idx.m));
    append_pod<uint64_t>(buf, static_cast<uint64_t>(idx.kc));
    append_pod<uint64_t>(buf, static_cast<uint64_t>(idx.dsub));
    for (int64_t id : idx.scene_ids) append_pod<int64_t>(buf, id);
    for (float v : idx.centroids) append_pod<float>(buf, v);
    buf.append(reinterpret_cast<const char*>(idx.codes.data()), idx.codes.size());
    append_pod<uint64_t>(buf, fnv1a64(buf.data() + kIdxMagicLen, buf.size() - kIdxMagicLen));
    atomic_write_text(path, buf);
}

namespace {

std::string read_index_file(const std::string& path, IndexKind want) {
    std::string buf = read_text(path);
    if (buf.size() < kIdxMagicLen + 1 + sizeof(uint64_t) ||
        std::memcmp(buf.data(), kIdxMagic, kIdxMagicLen) != 0)
        throw DataError("index '" + path + "': missing FSIDX1 magic");
    uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - sizeof(uint64_t), sizeof(uint64_t));
    uint64_t actual = fnv1a64(buf.data() + kIdxMagicLen,
                              buf.size() - kIdxMagicLen - sizeof(uint64_t));
    if (stored != actual)
        throw DataError("index '" + path + "': checksum mismatch (file corrupt)");
    uint8_t kind = static_cast<uint8_t>(buf[kIdxMagicLen]);
    if (kind > 1) throw DataError("index '" + path + "': unknown kind tag");
    if (kind != static_cast<uint8_t>(want))
        throw DataError("index '" + path + "' holds " +
                        std::string(kind == 0 ? "an exact" : "a product-quantized") +
                        " index, not the requested kind");
    return buf;
}

}  // namespace

IndexKind peek_index_kind(const std::string& path) {
    std::string buf = read_text(path);
    if (buf.size() < kIdxMagicLen + 1 || std::memcmp(buf.data(), kIdxMagic, kIdxMagicLen) != 0)
        throw DataError("index '" + path + "': missing FSIDX1 magic");
    uint8_t kind = static_cast<uint8_t>(buf[kIdxMagicLen]);
    if (kind > 1) throw DataError("index '" + path + "': unknown kind tag");
    return static_cast<IndexKind>(kind);
}

ExactIndex load_exact_index(const std::string& path) {
    std::string buf = read_index_file(path, IndexKind::exact);
    size_t off = kIdxMagicLen + 1;
    uint64_t count = read_pod<uint64_t>(buf, off, path);
    uint64_t dim = read_pod<uint64_t>(buf, off, path);
    if (dim == 0 || dim > (1ULL << 20)) throw DataError("index '" + path + "': implausible dimension");
    if (count > (1ULL << 32)) throw DataError("index '" + path + "': implausible count");
    ExactIndex idx;
    idx.dim = static_cast<int64_t>(dim);
    idx.scene_ids.resize(count);
    for (uint64_t i = 0; i < count; ++i)
        idx.scene_ids[i] = read_pod<int64_t>(buf, off, path);
    size_t payload = static_cast<size_t>(count) * dim * sizeof(float);
    if (off + payload + sizeof(uint64_t) != buf.size())
        throw DataError("index '" + path + "': size does not match header");
    idx.rows.resize(static_cast<size_t>(count) * dim);
    std::memcpy(idx.rows.data(), buf.data() + off, payload);
    validate_ids(idx.scene_ids);
    for (float v : idx.rows)
        if (!std::isfinite(v)) throw DataError("index '" + path + "': non-finite values");
    return idx;
}

PQIndex load_pq_index(const std::string& path) {
    std::string buf = read_index_file(path, IndexKind::pq);
    size_t off = kIdxMagicLen + 1;
    uint64_t count = read_pod<uint64_t>(buf, off, path);
    uint64_t dim = read_pod<uint64_t>(buf, off, path);
    uint64_t m = read_pod<uint64_t>(buf, off, path);
    uint64_t kc = read_pod<uint64_t>(buf, off, path);
    uint64_t dsub = read_pod<uint64_t>(buf, off, path);
    if (dim == 0 || m == 0 || dsub == 0 || m * dsub != dim || kc == 0 || kc > 256)
        throw DataError("index '" + path + "': inconsistent quantization parameters");
    if (count > (1ULL << 32)) throw DataError("index '" + path + "': implausible count");
    PQIndex idx;
    idx.dim = static_cast<int64_t>(dim);
    idx.m = static_cast<int64_t>(m);
    idx.kc = static_cast<int64_t>(kc);
    idx.dsub = static_cast<int64_t>(dsub);
    idx.scene_ids.resize(count);
    for (uint64_t i = 0; i < count; ++i)
        idx.scene_ids[i] = read_pod<int64_t>(buf, off, path);
    size_t cent_bytes = static_cast<size_t>(m) * kc * dsub * sizeof(float);
    size_t code_bytes = static_cast<size_t>(count) * m;
    if (off + cent_bytes + code_bytes + sizeof(uint64_t) != buf.size())
        throw DataError("index '" + path + "': size does not match header");
    idx.centroids.resize(static_cast<size_t>(m) * kc * dsub);
    std::memcpy(idx.centroids.data(), buf.data() + off, cent_bytes);
    off += cent_bytes;
    idx.codes.resize(code_bytes);
    std::memcpy(idx.codes.data(), buf.data() + off, code_bytes);
    validate_ids(idx.scene_ids);
    for (float v : idx.centroids)
        if (!std::isfinite(v)) throw DataError("index '" + path + "': non-finite centroids");
    for (uint8_t c : idx.codes)
        if (static_cast<uint64_t>(c) >= kc)
            throw DataError("index '" + path + "': code exceeds the codebook");
    return idx;
}

}  // namespace fastslow
