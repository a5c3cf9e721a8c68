#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "dfm/common.hpp"
#include "dfm/guidance.hpp"
#include "dfm/nn.hpp"
#include "dfm/posterior.hpp"
#include "dfm/statespace.hpp"
#include "dfm/training.hpp"

namespace dfm::io {

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline void write_pmf_csv(const std::string& path, const Pmf& pmf) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw config_error("cannot open '" + path + "' for writing");
    const StateSpace& sp = pmf.space();
    f << "# dims=" << sp.dims << " alphabet=" << sp.alphabet_size
      << " mask=" << (sp.mask_symbol ? *sp.mask_symbol : -1) << "\n";
    f << "index";
    for (int d = 0; d < sp.dims; ++d) f << ",d" << d;
    f << ",weight\n";
    f.precision(17);
    for (std::uint64_t i = 0; i < pmf.size(); ++i) {
        f << i;
        for (const int s : sp.state_of(i)) f << "," << s;
        f << "," << pmf[i] << "\n";
    }
}

inline Pmf read_pmf_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(f, line) || line.rfind("# dims=", 0) != 0)
        throw config_error("pmf csv '" + path + "': missing space header");
    int dims = 0, alphabet = 0, mask = -1;
    if (std::sscanf(line.c_str(), "# dims=%d alphabet=%d mask=%d", &dims, &alphabet, &mask) != 3)
        throw config_error("pmf csv '" + path + "': malformed space header");
    StateSpace sp(dims, alphabet, mask >= 0 ? std::optional<int>(mask) : std::nullopt);
    std::getline(f, line);  // column header
    std::vector<double> w(sp.checked_state_count(), 0.0);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');
        const std::uint64_t idx = std::stoull(tok);
        for (int d = 0; d < dims; ++d) std::getline(ss, tok, ',');
        std::getline(ss, tok, ',');
        if (idx >= w.size()) throw config_error("pmf csv '" + path + "': index out of range");
        w[idx] = std::stod(tok);
    }
    return Pmf::normalized(sp, std::move(w));
}

inline void write_samples_csv(const std::string& path, const SampleBatch& batch) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw config_error("cannot open '" + path + "' for writing");
    const int D = batch.space.dims;
    f << "chain_id";
    for (int d = 0; d < D; ++d) f << ",d_" << d;
    f << "\n";
    for (std::int64_t i = 0; i < batch.size(); ++i) {
        f << i;
        const auto st = batch.state(i);
        for (int d = 0; d < D; ++d) f << "," << st[static_cast<std::size_t>(d)];
        f << "\n";
    }
}

inline SampleBatch read_samples_csv(const std::string& path, const StateSpace& space) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open '" + path + "'");
    std::string line;
    std::getline(f, line);  // header
    SampleBatch b;
    b.space = space;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');  // chain id
        for (int d = 0; d < space.dims; ++d) {
            std::getline(ss, tok, ',');
            b.states.push_back(static_cast<std::int32_t>(std::stol(tok)));
        }
    }
    if (b.states.empty()) throw config_error("samples csv '" + path + "': no rows");
    return b;
}

inline void write_curve_csv(const std::string& path,
                            const std::vector<std::pair<std::int64_t, double>>& curve,
                            const std::string& value_name = "loss") {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw config_error("cannot open '" + path + "' for writing");
    f << "step," << value_name << "\n";
    f.precision(17);
    for (const auto& [s, v] : curve) f << s << "," << v << "\n";
}

// ---------------------------------------------------------------------------
// 16-bit PGM heatmaps (binary P5, most significant byte first, max-normalized)
// ---------------------------------------------------------------------------

inline void write_pgm16(const std::string& path, std::span<const double> grid, int width,
                        int height) {
    if (static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != grid.size())
        throw precondition_error("write_pgm16: grid size mismatch");
    double mx = 0.0;
    for (const double v : grid) mx = std::max(mx, v);
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw config_error("cannot open '" + path + "' for writing");
    f << "P5\n" << width << " " << height << "\n65535\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double v = mx > 0.0 ? grid[i] / mx : 0.0;
        const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
        const unsigned char hi = static_cast<unsigned char>(q >> 8);
        const unsigned char lo = static_cast<unsigned char>(q & 0xff);
        f.put(static_cast<char>(hi));
        f.put(static_cast<char>(lo));
    }
}

// Row-major raster of a 2-D pmf (first coordinate = row).
inline void write_pmf_pgm(const std::string& path, const Pmf& pmf) {
    const StateSpace& sp = pmf.space();
    if (sp.dims != 2) throw precondition_error("write_pmf_pgm: D=2 pmfs only");
    write_pgm16(path, pmf.weights(), sp.alphabet_size, sp.alphabet_size);
}

// ---------------------------------------------------------------------------
// DFMP model container: magic "DFMP", version, backend/kind tags, shape
// header, little-endian f64 payload. Architecture details live in a JSON
// sidecar next to the binary.
// ---------------------------------------------------------------------------

enum class ModelBackendTag : std::uint32_t { tabular = 1, mlp = 2 };
enum class ModelKindTag : std::uint32_t {
    posterior = 1,
    guidance_matrix = 2,
    guidance_scalar = 3,
    density_ratio = 4
};

struct ModelBundle {
    ModelBackendTag backend;
    ModelKindTag kind;
    std::vector<std::uint64_t> shape;
    std::vector<double> params;
    std::string sidecar_json;
};

inline void save_model(const std::string& path, const ModelBundle& bundle) {
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw config_error("cannot open '" + path + "' for writing");
    f.write("DFMP", 4);
    auto put_u32 = [&f](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_u64 = [&f](std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    put_u32(1u);  // version
    put_u32(static_cast<std::uint32_t>(bundle.backend));
    put_u32(static_cast<std::uint32_t>(bundle.kind));
    put_u32(static_cast<std::uint32_t>(bundle.shape.size()));
    for (const auto v : bundle.shape) put_u64(v);
    put_u64(bundle.params.size());
    f.write(reinterpret_cast<const char*>(bundle.params.data()),
            static_cast<std::streamsize>(bundle.params.size() * sizeof(double)));
    std::ofstream sc(path + ".json", std::ios::trunc);
    if (!sc) throw config_error("cannot open '" + path + ".json' for writing");
    sc << bundle.sidecar_json;
}

inline ModelBundle load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw config_error("cannot open '" + path + "'");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DFMP", 4) != 0)
        throw config_error("'" + path + "' is not a DFMP container");
    auto get_u32 = [&f]() {
        std::uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto get_u64 = [&f]() {
        std::uint64_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    const std::uint32_t version = get_u32();
    if (version != 1u) throw config_error("unsupported DFMP version");
    ModelBundle b;
    b.backend = static_cast<ModelBackendTag>(get_u32());
    b.kind = static_cast<ModelKindTag>(get_u32());
    const std::uint32_t n_shape = get_u32();
    b.shape.resize(n_shape);
    for (auto& v : b.shape) v = get_u64();
    b.params.resize(get_u64());
    f.read(reinterpret_cast<char*>(b.params.data()),
           static_cast<std::streamsize>(b.params.size() * sizeof(double)));
    if (!f) throw config_error("'" + path + "' is truncated");
    std::ifstream sc(path + ".json");
    if (sc) {
        std::stringstream ss;
        ss << sc.rdbuf();
        b.sidecar_json = ss.str();
    }
    return b;
}

}  // namespace dfm::io
