#include "qbara/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace qbara {

namespace {

constexpr uint8_t kKindQuantized = 1;
constexpr uint8_t kKindAdapter = 2;
constexpr uint8_t kKindCheckpoint = 3;
constexpr char kMagic[4] = {'Q', 'B', 'R', 'A'};

// --- little-endian primitives ---------------------------------------------

void put_bytes(std::ostream & out, const void * p, size_t n) {
    out.write(static_cast<const char *>(p), std::streamsize(n));
}

template <typename T>
void put_le(std::ostream & out, T v) {
    unsigned char buf[sizeof(T)];
    using U = std::conditional_t<sizeof(T) == 1, uint8_t,
              std::conditional_t<sizeof(T) == 2, uint16_t,
              std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>>>;
    U u;
    std::memcpy(&u, &v, sizeof(T));
    for (size_t i = 0; i < sizeof(T); ++i) {
        buf[i] = static_cast<unsigned char>(u >> (8 * i));
    }
    put_bytes(out, buf, sizeof(T));
}

void put_f32(std::ostream & out, double v) { put_le(out, std::bit_cast<uint32_t>(float(v))); }
void put_f64(std::ostream & out, double v) { put_le(out, std::bit_cast<uint64_t>(v)); }

class Reader {
public:
    explicit Reader(std::istream & in) : in_(in) {}

    size_t offset() const { return offset_; }

    void bytes(void * p, size_t n) {
        in_.read(static_cast<char *>(p), std::streamsize(n));
        if (size_t(in_.gcount()) != n) {
            throw FormatError("truncated record at offset " + std::to_string(offset_));
        }
        offset_ += n;
    }

    template <typename U>
    U le() {
        unsigned char buf[sizeof(U)];
        bytes(buf, sizeof(U));
        U u = 0;
        for (size_t i = 0; i < sizeof(U); ++i) {
            u |= U(buf[i]) << (8 * i);
        }
        return u;
    }

    uint8_t u8() { return le<uint8_t>(); }
    uint16_t u16() { return le<uint16_t>(); }
    uint32_t u32() { return le<uint32_t>(); }
    double f32() { return double(std::bit_cast<float>(le<uint32_t>())); }
    double f64() { return std::bit_cast<double>(le<uint64_t>()); }

    bool at_eof() {
        return in_.peek() == std::char_traits<char>::eof();
    }

private:
    std::istream & in_;
    size_t offset_ = 0;
};

void put_header(std::ostream & out, uint8_t kind) {
    put_bytes(out, kMagic, 4);
    put_le(out, kFormatVersion);
    put_le(out, kind);
}

void expect_header(Reader & r, uint8_t kind) {
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("bad magic");
    }
    uint16_t version = r.u16();
    if (version != kFormatVersion) {
        throw FormatError("unsupported format version " + std::to_string(version));
    }
    uint8_t k = r.u8();
    if (k != kind) {
        throw FormatError("unexpected record kind " + std::to_string(k) + ", wanted " +
                          std::to_string(kind));
    }
}

void put_matrix(std::ostream & out, const Matrix & m) {
    put_le(out, uint32_t(m.rows()));
    put_le(out, uint32_t(m.cols()));
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            put_f64(out, m(i, j));
        }
    }
}

Matrix read_matrix(Reader & r) {
    uint32_t rows = r.u32();
    uint32_t cols = r.u32();
    if (rows == 0 || cols == 0) {
        throw FormatError("matrix with zero dimension at offset " + std::to_string(r.offset()));
    }
    Matrix m(Index(rows), Index(cols));
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            m(i, j) = r.f64();
        }
    }
    return m;
}

QuantizedMatrix read_quantized(Reader & r) {
    expect_header(r, kKindQuantized);
    QuantizedMatrix q;
    q.rows = Index(r.u32());
    q.cols = Index(r.u32());
    q.config.tile_rows = Index(r.u16());
    q.config.tile_cols = Index(r.u16());
    q.config.bits = int(r.u8());
    uint8_t mode = r.u8();
    if (mode > 1) {
        throw FormatError("bad quant mode byte " + std::to_string(mode));
    }
    q.config.mode = QuantMode(mode);
    try {
        validate_config(q.config);
    } catch (const Error & e) {
        throw FormatError(std::string("invalid quantizer config: ") + e.what());
    }
    if (q.rows < 1 || q.cols < 1 || q.rows % q.config.tile_rows != 0 ||
        q.cols % q.config.tile_cols != 0) {
        throw FormatError("quantized geometry not divisible by tile");
    }
    const size_t tiles = size_t(q.tile_count());
    q.alphas.resize(tiles);
    q.betas.resize(tiles);
    for (size_t t = 0; t < tiles; ++t) {
        q.alphas[t] = r.f32();
    }
    for (size_t t = 0; t < tiles; ++t) {
        q.betas[t] = r.f32();
    }
    for (size_t t = 0; t < tiles; ++t) {
        if (!(q.alphas[t] >= 0.0) || !std::isfinite(q.alphas[t]) || !std::isfinite(q.betas[t])) {
            throw FormatError("invalid alpha/beta in tile " + std::to_string(t));
        }
    }
    const size_t count = size_t(q.rows) * size_t(q.cols);
    q.packed.resize((count * size_t(q.config.bits) + 7) / 8);
    r.bytes(q.packed.data(), q.packed.size());

    // range scan so no out-of-range code survives loading
    std::vector<uint8_t> codes = unpack_codes(q.packed, q.config.bits, count);
    const unsigned max_code = (q.config.mode == QuantMode::MinMax)
                                  ? (1u << q.config.bits) - 1
                                  : (1u << q.config.bits) - 2;
    for (uint8_t c : codes) {
        if (c > max_code) {
            throw FormatError("code out of range in quantized record");
        }
    }
    return q;
}

Adapter read_adapter(Reader & r) {
    expect_header(r, kKindAdapter);
    uint8_t kind = r.u8();
    Index lambda_in = Index(r.u16());
    Index lambda_out = Index(r.u16());
    uint32_t rank = r.u32();
    double scaling = r.f64();
    uint8_t op = r.u8();
    if (op > 2) {
        throw FormatError("bad scale operator byte " + std::to_string(op));
    }
    if (!std::isfinite(scaling)) {
        throw FormatError("non-finite adapter scaling");
    }
    if (lambda_in < 1 || lambda_out < 1) {
        throw FormatError("adapter lambda must be >= 1");
    }

    switch (kind) {
        case 0: {
            if (rank == 0) {
                throw FormatError("adapter rank must be >= 1");
            }
            LoraAdapter a;
            a.a = read_matrix(r);
            a.b = read_matrix(r);
            a.scaling = scaling;
            if (a.a.cols() != Index(rank) || a.b.rows() != Index(rank)) {
                throw FormatError("LoRA factors do not match declared rank");
            }
            return a;
        }
        case 1: {
            if (rank == 0) {
                throw FormatError("adapter rank must be >= 1");
            }
            BaraAdapter a;
            a.lambda_in = lambda_in;
            a.lambda_out = lambda_out;
            a.a = read_matrix(r);
            a.b = read_matrix(r);
            a.scaling = scaling;
            a.op = ScaleOperatorKind(op);
            if (a.a.cols() != Index(rank) || a.b.rows() != Index(rank)) {
                throw FormatError("BaRA factors do not match declared rank");
            }
            return a;
        }
        case 2: {
            HiraAdapter a;
            a.lambda_in = lambda_in;
            a.lambda_out = lambda_out;
            a.c = read_matrix(r);
            a.scaling = scaling;
            a.op = ScaleOperatorKind(op);
            return a;
        }
        default:
            throw FormatError("unknown adapter kind byte " + std::to_string(kind));
    }
}

Model read_checkpoint(Reader & r) {
    expect_header(r, kKindCheckpoint);
    uint32_t layers = r.u32();
    if (layers == 0) {
        throw FormatError("checkpoint with zero layers");
    }
    Model m;
    m.widths.resize(layers + 1);
    for (uint32_t i = 0; i <= layers; ++i) {
        m.widths[i] = Index(r.u32());
        if (m.widths[i] < 1) {
            throw FormatError("checkpoint width must be >= 1");
        }
    }
    uint8_t act = r.u8();
    if (act > 2) {
        throw FormatError("bad activation byte " + std::to_string(act));
    }
    m.activation = Activation(act);
    for (uint32_t i = 0; i < layers; ++i) {
        QuantizedMatrix base = read_quantized(r);
        Adapter adapter;
        if (uint8_t present = r.u8(); present == 1) {
            adapter = read_adapter(r);
        } else if (present != 0) {
            throw FormatError("bad adapter presence byte " + std::to_string(present));
        }
        try {
            m.layers.push_back(make_layer(std::move(base), std::move(adapter)));
        } catch (const Error & e) {
            throw FormatError("layer " + std::to_string(i) + ": " + e.what());
        }
    }
    try {
        validate_model(m);
    } catch (const Error & e) {
        throw FormatError(std::string("inconsistent checkpoint: ") + e.what());
    }
    return m;
}

template <typename T, typename SaveFn>
void save_to_file(const T & value, const std::string & path, SaveFn fn) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot open " + path + " for writing");
    }
    fn(value, out);
    out.flush();
    if (!out) {
        throw FormatError("write failed for " + path);
    }
}

template <typename LoadFn>
auto load_from_file(const std::string & path, LoadFn fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path);
    }
    auto value = fn(in);
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("trailing bytes in " + path);
    }
    return value;
}

}  // namespace

void save_quantized(const QuantizedMatrix & q, std::ostream & out) {
    put_header(out, kKindQuantized);
    put_le(out, uint32_t(q.rows));
    put_le(out, uint32_t(q.cols));
    put_le(out, uint16_t(q.config.tile_rows));
    put_le(out, uint16_t(q.config.tile_cols));
    put_le(out, uint8_t(q.config.bits));
    put_le(out, uint8_t(q.config.mode));
    for (double a : q.alphas) {
        put_f32(out, a);
    }
    for (double b : q.betas) {
        put_f32(out, b);
    }
    put_bytes(out, q.packed.data(), q.packed.size());
}

QuantizedMatrix load_quantized(std::istream & in) {
    Reader r(in);
    return read_quantized(r);
}

void save_adapter(const Adapter & a, std::ostream & out) {
    if (std::holds_alternative<std::monostate>(a)) {
        throw ParamError("save_adapter: no adapter present");
    }
    put_header(out, kKindAdapter);
    if (const auto * l = std::get_if<LoraAdapter>(&a)) {
        put_le(out, uint8_t(0));
        put_le(out, uint16_t(1));
        put_le(out, uint16_t(1));
        put_le(out, uint32_t(l->a.cols()));
        put_f64(out, l->scaling);
        put_le(out, uint8_t(ScaleOperatorKind::PoolRepeat));
        put_matrix(out, l->a);
        put_matrix(out, l->b);
    } else if (const auto * b = std::get_if<BaraAdapter>(&a)) {
        put_le(out, uint8_t(1));
        put_le(out, uint16_t(b->lambda_in));
        put_le(out, uint16_t(b->lambda_out));
        put_le(out, uint32_t(b->a.cols()));
        put_f64(out, b->scaling);
        put_le(out, uint8_t(b->op));
        put_matrix(out, b->a);
        put_matrix(out, b->b);
    } else {
        const HiraAdapter & h = std::get<HiraAdapter>(a);
        put_le(out, uint8_t(2));
        put_le(out, uint16_t(h.lambda_in));
        put_le(out, uint16_t(h.lambda_out));
        put_le(out, uint32_t(0));  // HiRA carries no rank
        put_f64(out, h.scaling);
        put_le(out, uint8_t(h.op));
        put_matrix(out, h.c);
    }
}

Adapter load_adapter(std::istream & in) {
    Reader r(in);
    return read_adapter(r);
}

void save_checkpoint(const Model & m, std::ostream & out) {
    validate_model(m);
    for (const QuantizedLinear & layer : m.layers) {
        if (layer.bias) {
            throw CapabilityError("save_checkpoint: the checkpoint format carries no biases");
        }
    }
    put_header(out, kKindCheckpoint);
    put_le(out, uint32_t(m.layers.size()));
    for (Index w : m.widths) {
        put_le(out, uint32_t(w));
    }
    put_le(out, uint8_t(m.activation));
    for (const QuantizedLinear & layer : m.layers) {
        save_quantized(layer.base, out);
        if (std::holds_alternative<std::monostate>(layer.adapter)) {
            put_le(out, uint8_t(0));
        } else {
            put_le(out, uint8_t(1));
            save_adapter(layer.adapter, out);
        }
    }
}

Model load_checkpoint(std::istream & in) {
    Reader r(in);
    return read_checkpoint(r);
}

void save_raw_matrix(const Matrix & m, std::ostream & out) {
    put_matrix(out, m);
}

Matrix load_raw_matrix(std::istream & in) {
    Reader r(in);
    Matrix m = read_matrix(r);
    if (!m.allFinite()) {
        throw FormatError("raw matrix contains non-finite values");
    }
    return m;
}

void save_quantized_file(const QuantizedMatrix & q, const std::string & path) {
    save_to_file(q, path, [](const QuantizedMatrix & v, std::ostream & o) { save_quantized(v, o); });
}
QuantizedMatrix load_quantized_file(const std::string & path) {
    return load_from_file(path, [](std::istream & i) { return load_quantized(i); });
}
void save_adapter_file(const Adapter & a, const std::string & path) {
    save_to_file(a, path, [](const Adapter & v, std::ostream & o) { save_adapter(v, o); });
}
Adapter load_adapter_file(const std::string & path) {
    return load_from_file(path, [](std::istream & i) { return load_adapter(i); });
}
void save_checkpoint_file(const Model & m, const std::string & path) {
    save_to_file(m, path, [](const Model & v, std::ostream & o) { save_checkpoint(v, o); });
}
Model load_checkpoint_file(const std::string & path) {
    return load_from_file(path, [](std::istream & i) { return load_checkpoint(i); });
}
void save_raw_matrix_file(const Matrix & m, const std::string & path) {
    save_to_file(m, path, [](const Matrix & v, std::ostream & o) { save_raw_matrix(v, o); });
}
Matrix load_raw_matrix_file(const std::string & path) {
    return load_from_file(path, [](std::istream & i) { return load_raw_matrix(i); });
}

std::string csv_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string csv_int(long long v) {
    return std::to_string(v);
}

namespace {

std::string csv_escape(const std::string & field) {
    if (field.find_first_of(",\"\n") == std::string::npos) {
        return field;
    }
    std::string quoted = "\"";
    for (char c : field) {
        if (c == '"') {
            quoted += '"';
        }
        quoted += c;
    }
    quoted += '"';
    return quoted;
}

}  // namespace

void write_csv(const CsvTable & table, std::ostream & out) {
    auto emit = [&out](const std::vector<std::string> & row) {
        for (size_t i = 0; i < row.size(); ++i) {
            out << (i ? "," : "") << csv_escape(row[i]);
        }
        out << "\n";
    };
    emit(table.header);
    for (const auto & row : table.rows) {
        if (row.size() != table.header.size()) {
            throw ParamError("write_csv: row width differs from header");
        }
        emit(row);
    }
}

void write_csv_file(const CsvTable & table, const std::string & path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot open " + path + " for writing");
    }
    write_csv(table, out);
    out.flush();
    if (!out) {
        throw FormatError("write failed for " + path);
    }
}

}  // namespace qbara
