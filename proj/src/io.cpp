#include "casal/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace casal {

static_assert(std::endian::native == std::endian::little, "container encoding assumes a little-endian host");

namespace {

void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof(v)); }

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    std::uint64_t u64() {
        std::uint64_t v = 0;
        take(&v, sizeof(v));
        return v;
    }

    std::string str(std::uint64_t n) {
        if (n > remaining()) throw Error("tensor file: truncated string");
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void take(void* dst, std::size_t n) {
        if (n > remaining()) throw Error("tensor file: unexpected end of data");
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

const Mat& TensorFile::tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
        if (n == name) return m;
    }
    throw Error("tensor file: missing tensor " + name);
}

std::string encode_tensor_file(const TensorFile& f) {
    if (f.magic.size() != 8) throw Error("tensor file: magic must be 8 bytes");
    std::string out = f.magic;
    const std::string header = f.header.dump();
    put_u64(out, header.size());
    out += header;
    put_u64(out, f.tensors.size());
    for (const auto& [name, m] : f.tensors) {
        put_u64(out, name.size());
        out += name;
        put_u64(out, 2);
        put_u64(out, static_cast<std::uint64_t>(m.rows()));
        put_u64(out, static_cast<std::uint64_t>(m.cols()));
        out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    return out;
}

TensorFile decode_tensor_file(const std::string& bytes, std::string_view expected_magic) {
    Reader r(bytes);
    TensorFile f;
    f.magic = r.str(8);
    if (!expected_magic.empty() && f.magic != expected_magic) {
        throw Error("tensor file: bad magic '" + f.magic + "', expected '" + std::string(expected_magic) + "'");
    }
    f.header = nlohmann::json::parse(r.str(r.u64()));
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.str(r.u64());
        const std::uint64_t rank = r.u64();
        if (rank == 0 || rank > 2) throw Error("tensor file: unsupported rank for " + name);
        std::uint64_t rows = 1, cols = r.u64();
        if (rank == 2) {
            rows = cols;
            cols = r.u64();
        }
        if (rows != 0 && cols > r.remaining() / sizeof(double) / rows) throw Error("tensor file: truncated tensor " + name);
        Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        r.take(m.data(), static_cast<std::size_t>(rows * cols) * sizeof(double));
        f.tensors.emplace_back(std::move(name), std::move(m));
    }
    if (r.remaining() != 0) throw Error("tensor file: trailing bytes");
    return f;
}

void write_tensor_file(const fs::path& path, const TensorFile& file) { write_text(path, encode_tensor_file(file)); }

TensorFile read_tensor_file(const fs::path& path, std::string_view expected_magic) {
    return decode_tensor_file(read_text(path), expected_magic);
}

void save_checkpoint(const fs::path& path, const ModelConfig& config, const TransformerWeights& weights) {
    TensorFile f;
    f.magic = kCheckpointMagic;
    f.header = config;
    for_each_tensor(weights, [&](const std::string& name, const Mat& m) { f.tensors.emplace_back(name, m); });
    write_tensor_file(path, f);
}

Checkpoint load_checkpoint(const fs::path& path) {
    TensorFile f = read_tensor_file(path, kCheckpointMagic);
    Checkpoint ck;
    ck.config = f.header.get<ModelConfig>();
    ck.weights = zeros_like(ck.config);
    std::map<std::string, Mat*> slots;
    for_each_tensor(ck.weights, [&](const std::string& name, Mat& m) { slots[name] = &m; });
    if (slots.size() != f.tensors.size()) throw ShapeError("checkpoint: tensor count does not match config");
    for (auto& [name, m] : f.tensors) {
        auto it = slots.find(name);
        if (it == slots.end()) throw ShapeError("checkpoint: unexpected tensor " + name);
        require_shape(m, it->second->rows(), it->second->cols(), "checkpoint " + name);
        *it->second = std::move(m);
    }
    validate(ck.weights, ck.config);
    return ck;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("write failed for " + path.string());
}

std::string hash_file(const fs::path& path) { return sha256_hex(read_text(path)); }

}  // namespace casal
