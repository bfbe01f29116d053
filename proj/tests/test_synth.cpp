#include <catch2/catch_amalgamated.hpp>

#include "glab/synth.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace glab;

namespace {

EventSpec tiny_spec() {
    EventSpec s;
    s.h = 32;
    s.w = 32;
    s.seed = 99;
    return s;
}

} // namespace

TEST_CASE("flat linear event is a column-constant Ricker", "[synth]") {
    EventSpec s = tiny_spec();
    s.events_min = s.events_max = 1;
    s.hyperbolic_events = false;
    // scan for a seed whose single event is nearly flat, then check columns agree
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        s.seed = seed;
        Tensor img = gen_primary(s, 0);
        const int h = s.h, w = s.w;
        // column profiles must be shifts of one another; for a flat event they
        // are equal up to the sub-pixel slope. Use a strict check on slope==0
        // surrogates: compare column argmax rows.
        int amax0 = 0;
        double best = -1;
        for (int i = 0; i < h; ++i)
            if (std::fabs(img[i * w]) > best) best = std::fabs(img[i * w]), amax0 = i;
        bool flat = true;
        for (int j = 1; j < w && flat; ++j) {
            int amax = 0;
            double b2 = -1;
            for (int i = 0; i < h; ++i)
                if (std::fabs(img[i * w + j]) > b2) b2 = std::fabs(img[i * w + j]), amax = i;
            flat = std::abs(amax - amax0) <= 1;
        }
        if (!flat) continue;
        // found a near-flat event: peak row energy must dominate and columns match closely
        for (int j = 1; j < w; ++j)
            CHECK(img[amax0 * w + j] == Catch::Approx(img[amax0 * w]).margin(0.3));
        return;
    }
    FAIL("no near-flat event found in 200 seeds");
}

TEST_CASE("generation is deterministic in (seed, index)", "[synth]") {
    EventSpec s = tiny_spec();
    Tensor a = gen_primary(s, 3);
    Tensor b = gen_primary(s, 3);
    REQUIRE(a.values().size() == b.values().size());
    CHECK(std::memcmp(a.values().data(), b.values().data(), a.values().size() * sizeof(double)) == 0);
    Tensor c = gen_primary(s, 4);
    CHECK(std::memcmp(a.values().data(), c.values().data(), a.values().size() * sizeof(double)) != 0);
}

TEST_CASE("event count histogram is uniform over the configured range", "[synth]") {
    EventSpec s = tiny_spec();
    s.events_min = 1;
    s.events_max = 4;
    // counting oracle: number of events recovered from the per-sample stream
    // is not observable from the image; instead draw 1000 samples and count
    // connected events indirectly via the spec's own deterministic draw.
    std::vector<int> counts(5, 0);
    for (int i = 0; i < 1000; ++i) {
        Rng rng = Rng::stream(s.seed, static_cast<std::uint64_t>(i) * 2 + 0);
        counts[static_cast<std::size_t>(rng.uniform_int(s.events_min, s.events_max))]++;
    }
    for (int k = 1; k <= 4; ++k)
        CHECK(std::fabs(counts[static_cast<std::size_t>(k)] / 1000.0 - 0.25) < 0.05);
}

TEST_CASE("apply_ghost places a reversed copy at the delay", "[synth]") {
    std::vector<double> y(32 * 8, 0.0);
    y[10 * 8 + 3] = 1.0; // unit impulse at row 10
    Tensor img({1, 32, 8}, std::move(y));
    Tensor x = apply_ghost(img, 5, -1.0);
    CHECK(x[10 * 8 + 3] == 1.0);
    CHECK(x[15 * 8 + 3] == -1.0);
    int nonzero = 0;
    for (double v : x.values()) nonzero += v != 0.0;
    CHECK(nonzero == 2);
}

TEST_CASE("apply_ghost identities", "[synth]") {
    EventSpec s = tiny_spec();
    Tensor y = gen_primary(s, 0);

    SECTION("rho = 0 is the identity") {
        Tensor x = apply_ghost(y, 5, 0.0);
        CHECK(std::memcmp(x.values().data(), y.values().data(), x.values().size() * sizeof(double)) == 0);
    }
    SECTION("X = Y + rho * shift(Y) holds bitwise per element") {
        const int tau = 6;
        const double rho = -0.75;
        Tensor x = apply_ghost(y, tau, rho);
        bool ok = true;
        for (int i = 0; i < s.h && ok; ++i)
            for (int j = 0; j < s.w && ok; ++j) {
                const double ghost = i >= tau ? rho * y[(i - tau) * s.w + j] : 0.0;
                ok = x[i * s.w + j] == y[i * s.w + j] + ghost;
            }
        CHECK(ok);
    }
    SECTION("linearity, bitwise on a rounding-free construction") {
        // power-of-two scalars, rho = -1 and column-disjoint supports make
        // every float step commute with the exact-arithmetic identity
        Tensor raw2 = gen_primary(s, 1);
        std::vector<double> v1(y.values()), v2(raw2.values());
        for (int i = 0; i < s.h; ++i)
            for (int j = 0; j < s.w; ++j) {
                if (j % 2 == 1) v1[static_cast<std::size_t>(i) * s.w + j] = 0.0;
                if (j % 2 == 0) v2[static_cast<std::size_t>(i) * s.w + j] = 0.0;
            }
        Tensor y1(y.shape(), v1), y2(y.shape(), v2);
        const double a = 2.0, b = -0.5;
        std::vector<double> comb(v1.size());
        for (std::size_t i = 0; i < comb.size(); ++i) comb[i] = a * v1[i] + b * v2[i];
        Tensor lhs = apply_ghost(Tensor(y.shape(), comb), 5, -1.0);
        Tensor g1 = apply_ghost(y1, 5, -1.0);
        Tensor g2 = apply_ghost(y2, 5, -1.0);
        bool ok = true;
        for (std::size_t i = 0; i < comb.size() && ok; ++i)
            ok = lhs[static_cast<int>(i)] == a * g1[static_cast<int>(i)] + b * g2[static_cast<int>(i)];
        CHECK(ok);
    }
    SECTION("linearity with general scalars, tight tolerance") {
        Tensor y2 = gen_primary(s, 1);
        const double a = 1.3, b = -0.7;
        std::vector<double> comb(y.values().size());
        for (std::size_t i = 0; i < comb.size(); ++i)
            comb[i] = a * y[static_cast<int>(i)] + b * y2[static_cast<int>(i)];
        Tensor lhs = apply_ghost(Tensor(y.shape(), comb), 5, -0.9);
        Tensor g1 = apply_ghost(y, 5, -0.9);
        Tensor g2 = apply_ghost(y2, 5, -0.9);
        for (std::size_t i = 0; i < comb.size(); ++i)
            CHECK(lhs[static_cast<int>(i)] ==
                  Catch::Approx(a * g1[static_cast<int>(i)] + b * g2[static_cast<int>(i)]).margin(1e-14));
    }
    SECTION("tau-periodic image cancels in the interior") {
        const int tau = 8;
        std::vector<double> per(static_cast<std::size_t>(s.h) * s.w);
        for (int i = 0; i < s.h; ++i)
            for (int j = 0; j < s.w; ++j) per[static_cast<std::size_t>(i) * s.w + j] = 0.25 * ((i % tau) - 3);
        Tensor x = apply_ghost(Tensor({1, s.h, s.w}, per), tau, -1.0);
        for (int i = tau; i < s.h; ++i)
            for (int j = 0; j < s.w; ++j) CHECK(x[i * s.w + j] == 0.0);
    }
    SECTION("tau >= h rejected") {
        CHECK_THROWS_AS(apply_ghost(y, s.h, -1.0), std::invalid_argument);
    }
}

TEST_CASE("dataset round-trip is bit-exact", "[synth]") {
    EventSpec s = tiny_spec();
    Dataset ds = make_dataset(s, 4);
    const std::string path = std::filesystem::temp_directory_path() / "glab_ds_test.glab";
    save_dataset(ds, path);
    Dataset back = load_dataset(path);
    REQUIRE(back.size() == 4);
    for (int i = 0; i < 4; ++i) {
        CHECK(std::memcmp(back.pairs[i].x.values().data(), ds.pairs[i].x.values().data(),
                          ds.pairs[i].x.values().size() * sizeof(double)) == 0);
        CHECK(std::memcmp(back.pairs[i].y.values().data(), ds.pairs[i].y.values().data(),
                          ds.pairs[i].y.values().size() * sizeof(double)) == 0);
    }
    // twice-saved file is byte-identical
    const std::string path2 = std::filesystem::temp_directory_path() / "glab_ds_test2.glab";
    save_dataset(back, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("corrupt dataset files are rejected with diagnostics", "[synth]") {
    EventSpec s = tiny_spec();
    Dataset ds = make_dataset(s, 2);
    const std::string path = std::filesystem::temp_directory_path() / "glab_ds_bad.glab";
    save_dataset(ds, path);

    SECTION("truncated file names expected vs actual byte count") {
        std::ifstream f(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        f.close();
        std::ofstream g(path, std::ios::binary | std::ios::trunc);
        g.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        g.close();
        CHECK_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("expected") &&
                                                  Catch::Matchers::ContainsSubstring("got"));
    }
    SECTION("bad magic is rejected with offset") {
        std::fstream g(path, std::ios::binary | std::ios::in | std::ios::out);
        g.seekp(0);
        g.write("XXXX", 4);
        g.close();
        CHECK_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("magic") &&
                                                  Catch::Matchers::ContainsSubstring("offset 0"));
    }
    SECTION("bad version is rejected") {
        std::fstream g(path, std::ios::binary | std::ios::in | std::ios::out);
        g.seekp(4);
        const char v2[4] = {2, 0, 0, 0};
        g.write(v2, 4);
        g.close();
        CHECK_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("version"));
    }
    std::filesystem::remove(path);
}

TEST_CASE("deterministic mapping and the denoising-mean property", "[synth]") {
    EventSpec s = tiny_spec();
    SECTION("sigma_n = 0: X -> Y is single valued") {
        Dataset a = make_dataset(s, 8);
        Dataset b = make_dataset(s, 8);
        for (int i = 0; i < 8; ++i) {
            CHECK(a.pairs[i].x.values() == b.pairs[i].x.values());
            CHECK(a.pairs[i].y.values() == b.pairs[i].y.values());
        }
    }
    SECTION("sigma_n > 0: mean of noisy targets approaches the clean target") {
        s.noise = 0.1;
        const Tensor clean = gen_primary(s, 0);
        const int reps = 2000;
        std::vector<double> mean(clean.values().size(), 0.0);
        for (int r = 0; r < reps; ++r) {
            EventSpec sr = s;
            sr.seed = s.seed; // same image stream
            // fresh noise stream per repetition: emulate repeated X with new noise
            Rng rng = Rng::stream(s.seed ^ 0x6e6f697365ull, 100000ull + static_cast<std::uint64_t>(r));
            for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += clean[static_cast<int>(i)] + s.noise * rng.normal();
        }
        double worst = 0.0;
        for (std::size_t i = 0; i < mean.size(); ++i)
            worst = std::max(worst, std::fabs(mean[i] / reps - clean[static_cast<int>(i)]));
        // 4 sigma / sqrt(N)
        CHECK(worst < 4.0 * s.noise / std::sqrt(static_cast<double>(reps)));
    }
}

TEST_CASE("200-pair 64x64 dataset generates quickly", "[synth]") {
    EventSpec s;
    s.h = 64;
    s.w = 64;
    s.seed = 7;
    const auto t0 = std::chrono::steady_clock::now();
    Dataset ds = make_dataset(s, 200);
    const auto t1 = std::chrono::steady_clock::now();
    CHECK(ds.size() == 200);
    CHECK(std::chrono::duration<double>(t1 - t0).count() < 10.0);
}
