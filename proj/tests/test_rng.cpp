#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "labpred/rng.hpp"

using namespace labpred;

TEST_SUITE("rng") {

TEST_CASE("same seed gives the same stream, different seeds diverge") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        uint64_t va = a.next_u64();
        CHECK(va == b.next_u64());
    }
    int differing = 0;
    Rng a2(42);
    for (int i = 0; i < 100; ++i)
        if (a2.next_u64() != c.next_u64()) ++differing;
    CHECK(differing > 90);
}

TEST_CASE("uniform lands in [0, 1) and fills the range") {
    Rng rng(7);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
        sum += u;
    }
    CHECK(lo < 0.001);
    CHECK(hi > 0.999);
    CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("below covers every residue") {
    Rng rng(11);
    std::set<uint64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        uint64_t v = rng.below(7);
        CHECK(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
}

TEST_CASE("range is inclusive on both ends") {
    Rng rng(3);
    bool saw_lo = false, saw_hi = false;
    for (int i = 0; i < 2000; ++i) {
        int v = rng.range(2, 5);
        CHECK(v >= 2);
        CHECK(v <= 5);
        saw_lo |= v == 2;
        saw_hi |= v == 5;
    }
    CHECK(saw_lo);
    CHECK(saw_hi);
}

TEST_CASE("gaussian has the requested moments") {
    Rng rng(19);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        double g = rng.gaussian(2.0, 3.0);
        sum += g;
        sq += g * g;
    }
    double mean = sum / n;
    double var = sq / n - mean * mean;
    CHECK(mean == doctest::Approx(2.0).epsilon(0.02));
    CHECK(std::sqrt(var) == doctest::Approx(3.0).epsilon(0.02));
}

TEST_CASE("shuffle permutes without losing elements") {
    Rng rng(5);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[i] = i;
    std::vector<int> shuffled = v;
    rng.shuffle(shuffled);
    CHECK(shuffled != v);  // 50! orderings; identity would be astonishing
    std::vector<int> sorted = shuffled;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == v);
}

TEST_CASE("shuffle is deterministic per seed") {
    std::vector<int> a(20), b(20);
    for (int i = 0; i < 20; ++i) a[i] = b[i] = i;
    Rng r1(99), r2(99);
    r1.shuffle(a);
    r2.shuffle(b);
    CHECK(a == b);
}

TEST_CASE("derive_seed separates purposes and indices") {
    uint64_t master = 1;
    std::set<uint64_t> seeds{
        derive_seed(master, "patient-split"),
        derive_seed(master, "event-permutation"),
        derive_seed(master, "model-init"),
        derive_seed(master, "patient", 0),
        derive_seed(master, "patient", 1),
        derive_seed(master, "stay", 0),
    };
    CHECK(seeds.size() == 6);
    CHECK(derive_seed(2, "patient", 0) != derive_seed(1, "patient", 0));
    CHECK(derive_seed(1, "patient", 3) == derive_seed(1, "patient", 3));
}

TEST_CASE("fnv1a64 matches the reference constants") {
    // Published FNV-1a test vectors.
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

}  // TEST_SUITE
