#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"

#include "cqvae/rng.hpp"
#include "cqvae/tape.hpp"
#include "cqvae/tensor.hpp"

using namespace cqvae;

namespace {

Tensord random_tensor(Dims shape, RngStream& rng, double lo = -1.0, double hi = 1.0) {
    Tensord t(shape);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Central finite differences against reverse-mode gradients. The build
// callback must construct the full graph from the given input nodes and
// return a scalar loss node. Each perturbed evaluation rebuilds the graph
// from scratch so the check is independent of any tape state.
void check_gradients(const std::string& name, const std::vector<Tensord>& inputs,
                     const std::function<int(Taped&, const std::vector<int>&)>& build,
                     double step = 1e-5, double tol = 1e-4) {
    Taped tape;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensord& t : inputs) ids.push_back(tape.input(t));
    const int loss = build(tape, ids);
    REQUIRE(tape.value(loss).numel() == 1);
    tape.backward(loss);

    auto eval = [&](const std::vector<Tensord>& xs) {
        Taped t2;
        std::vector<int> ids2;
        for (const Tensord& x : xs) ids2.push_back(t2.input(x));
        return t2.value(build(t2, ids2)).data[0];
    };

    std::vector<Tensord> work = inputs;
    for (size_t i = 0; i < inputs.size(); ++i) {
        REQUIRE(tape.has_grad(ids[i]));
        const Tensord& g = tape.grad(ids[i]);
        for (size_t j = 0; j < work[i].data.size(); ++j) {
            const double orig = work[i].data[j];
            work[i].data[j] = orig + step;
            const double fp = eval(work);
            work[i].data[j] = orig - step;
            const double fm = eval(work);
            work[i].data[j] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = g.data[j];
            const double denom = std::max({1.0, std::fabs(fd), std::fabs(an)});
            CHECK_MESSAGE(std::fabs(an - fd) <= tol * denom,
                          name << " input " << i << " elem " << j << ": analytic " << an
                               << " vs finite-diff " << fd);
        }
    }
}

// Weighted sum makes the loss sensitive to every output element separately.
int weighted_sum(Taped& t, int node, RngStream& rng) {
    Tensord w(t.value(node).shape);
    for (double& v : w.data) v = rng.uniform(-1.0, 1.0);
    return t.sum_all(t.mul(node, t.constant(w)));
}

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
    Taped tape;
    const int x = tape.input(Tensord::from(Dims{1, 3}, {0.0, 0.0, 0.0}));
    const Tensord& y = tape.value(tape.softmax_last(x));
    for (int c = 0; c < 3; ++c) CHECK(y.data[size_t(c)] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("matmul by the identity returns the other operand") {
    RngStream rng(11);
    Tensord a = random_tensor(Dims{3, 4}, rng);
    Tensord eye(Dims{3, 3}, 0.0);
    for (int i = 0; i < 3; ++i) eye.at2(i, i) = 1.0;
    Taped tape;
    const Tensord& y = tape.value(tape.matmul(tape.input(eye), tape.input(a)));
    REQUIRE(y.shape == a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(y.data[i] == doctest::Approx(a.data[i]).epsilon(1e-14));
}

TEST_CASE("conv2d with a 1x1 scaling kernel doubles the image") {
    Taped tape;
    const int x = tape.input(Tensord::from(Dims{1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}));
    const int w = tape.input(Tensord::from(Dims{1, 1, 1, 1}, {2.0}));
    const int b = tape.input(Tensord(Dims{1}, 0.0));
    const Tensord& y = tape.value(tape.conv2d(x, w, b, 1, 0));
    REQUIRE(y.shape == Dims{1, 1, 2, 2});
    const std::vector<double> want = {2.0, 4.0, 6.0, 8.0};
    for (size_t i = 0; i < want.size(); ++i) CHECK(y.data[i] == doctest::Approx(want[i]).epsilon(1e-14));
}

TEST_CASE("gradient of sum of squares") {
    Taped tape;
    const int w = tape.input(Tensord::from(Dims{2}, {1.0, 2.0}));
    tape.backward(tape.sum_all(tape.square(w)));
    const Tensord& g = tape.grad(w);
    CHECK(g.data[0] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(g.data[1] == doctest::Approx(4.0).epsilon(1e-14));
}

TEST_CASE("softmax cross-entropy gradient is probabilities minus one-hot") {
    // loss = -log softmax(x)[target] at uniform logits
    Taped tape;
    const int x = tape.input(Tensord(Dims{1, 4}, 0.5));
    const int p = tape.softmax_last(x);
    const int picked = tape.gather_last(tape.log_eps(p, 0.0), {2});
    tape.backward(tape.scale(tape.sum_all(picked), -1.0));
    const Tensord& g = tape.grad(x);
    const Tensord& pv = tape.value(p);
    for (int c = 0; c < 4; ++c) {
        const double want = pv.data[size_t(c)] - (c == 2 ? 1.0 : 0.0);
        CHECK(g.data[size_t(c)] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("finite-difference check per op") {
    RngStream rng(1234);

    SUBCASE("add sub mul") {
        std::vector<Tensord> in = {random_tensor(Dims{3, 4}, rng), random_tensor(Dims{3, 4}, rng)};
        check_gradients("add", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(7);
            return weighted_sum(t, t.add(v[0], v[1]), wr);
        });
        check_gradients("sub", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(8);
            return weighted_sum(t, t.sub(v[0], v[1]), wr);
        });
        check_gradients("mul", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(9);
            return weighted_sum(t, t.mul(v[0], v[1]), wr);
        });
    }

    SUBCASE("affine and broadcast helpers") {
        std::vector<Tensord> in = {random_tensor(Dims{4, 3}, rng), random_tensor(Dims{3}, rng)};
        check_gradients("affine", {in[0]}, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(10);
            return weighted_sum(t, t.affine(v[0], 1.7, -0.3), wr);
        });
        check_gradients("add_rowvec", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(11);
            return weighted_sum(t, t.add_rowvec(v[0], v[1]), wr);
        });
        std::vector<Tensord> in2 = {random_tensor(Dims{4, 3}, rng), random_tensor(Dims{4}, rng)};
        check_gradients("scale_rows", in2, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(12);
            return weighted_sum(t, t.scale_rows(v[0], v[1]), wr);
        });
    }

    SUBCASE("unary ops") {
        Tensord x = random_tensor(Dims{3, 3}, rng);
        for (double& v : x.data) v += (v >= 0 ? 0.2 : -0.2);  // keep relu away from its kink
        check_gradients("relu", {x}, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(13);
            return weighted_sum(t, t.relu(v[0]), wr);
        });
        check_gradients("sigmoid", {x}, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(14);
            return weighted_sum(t, t.sigmoid(v[0]), wr);
        });
        check_gradients("exp", {x}, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(15);
            return weighted_sum(t, t.exp(v[0]), wr);
        });
        check_gradients("square", {x}, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(16);
            return weighted_sum(t, t.square(v[0]), wr);
        });
        Tensord pos = random_tensor(Dims{3, 3}, rng, 0.3, 2.0);
        check_gradients("log_eps", {pos}, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(17);
            return weighted_sum(t, t.log_eps(v[0]), wr);
        });
    }

    SUBCASE("softmax and reductions") {
        Tensord x = random_tensor(Dims{4, 5}, rng);
        check_gradients("softmax_last", {x}, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(18);
            return weighted_sum(t, t.softmax_last(v[0]), wr);
        });
        check_gradients("sum_all", {x}, [&](Taped& t, const std::vector<int>& v) {
            return t.sum_all(v[0]);
        });
        check_gradients("mean_all", {x}, [&](Taped& t, const std::vector<int>& v) {
            return t.mean_all(t.square(v[0]));
        });
    }

    SUBCASE("matmul") {
        std::vector<Tensord> in = {random_tensor(Dims{3, 4}, rng), random_tensor(Dims{4, 2}, rng)};
        check_gradients("matmul", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(19);
            return weighted_sum(t, t.matmul(v[0], v[1]), wr);
        });
    }

    SUBCASE("conv2d") {
        std::vector<Tensord> in = {random_tensor(Dims{2, 2, 5, 5}, rng),
                                   random_tensor(Dims{3, 2, 3, 3}, rng),
                                   random_tensor(Dims{3}, rng)};
        check_gradients("conv2d s1p0", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(20);
            return weighted_sum(t, t.conv2d(v[0], v[1], v[2], 1, 0), wr);
        });
        check_gradients("conv2d s2p1", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(21);
            return weighted_sum(t, t.conv2d(v[0], v[1], v[2], 2, 1), wr);
        });
    }

    SUBCASE("conv2d_transpose") {
        std::vector<Tensord> in = {random_tensor(Dims{2, 3, 4, 4}, rng),
                                   random_tensor(Dims{3, 2, 3, 3}, rng),
                                   random_tensor(Dims{2}, rng)};
        check_gradients("conv2d_transpose s2p1", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(22);
            return weighted_sum(t, t.conv2d_transpose(v[0], v[1], v[2], 2, 1, 1), wr);
        });
        check_gradients("conv2d_transpose s1p0", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(23);
            return weighted_sum(t, t.conv2d_transpose(v[0], v[1], v[2], 1, 0, 0), wr);
        });
    }

    SUBCASE("structural ops") {
        std::vector<Tensord> in = {random_tensor(Dims{2, 6}, rng), random_tensor(Dims{2, 3}, rng)};
        check_gradients("reshape", {in[0]}, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(24);
            return weighted_sum(t, t.reshape(v[0], Dims{3, 4}), wr);
        });
        check_gradients("concat axis1", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(25);
            return weighted_sum(t, t.concat(v[0], v[1], 1), wr);
        });
        check_gradients("concat axis0", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(29);
            return weighted_sum(t, t.concat(t.reshape(v[0], Dims{4, 3}), v[1], 0), wr);
        });
        check_gradients("gather_last", {in[0]}, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(26);
            return weighted_sum(t, t.gather_last(v[0], {4, 1}), wr);
        });
    }

    SUBCASE("straight_through passes gradients to the soft input") {
        Tensord soft = random_tensor(Dims{2, 3}, rng);
        Tensord hard(Dims{2, 3}, 0.0);
        hard.at2(0, 1) = 1.0;
        hard.at2(1, 2) = 1.0;
        Taped tape;
        const int s = tape.input(soft);
        const int st = tape.straight_through(s, hard);
        // forward shows the hard values
        for (size_t i = 0; i < hard.data.size(); ++i) CHECK(tape.value(st).data[i] == hard.data[i]);
        RngStream wr(27);
        Tensord w(Dims{2, 3});
        for (double& v : w.data) v = wr.uniform(-1.0, 1.0);
        tape.backward(tape.sum_all(tape.mul(st, tape.constant(w))));
        // backward behaves as identity
        for (size_t i = 0; i < w.data.size(); ++i) {
            CHECK(tape.grad(s).data[i] == doctest::Approx(w.data[i]).epsilon(1e-14));
        }
    }

    SUBCASE("composite network head") {
        // softmax rows -> log -> weighted mean, stacked on a matmul; the kind of
        // graph the encoder head builds.
        std::vector<Tensord> in = {random_tensor(Dims{2, 5}, rng), random_tensor(Dims{5, 6}, rng),
                                   random_tensor(Dims{6}, rng)};
        check_gradients("composite", in, [&](Taped& t, const std::vector<int>& v) {
            RngStream wr(28);
            const int h = t.relu(t.add_rowvec(t.matmul(v[0], v[1]), v[2]));
            const int p = t.softmax_last(t.reshape(h, Dims{4, 3}));
            return weighted_sum(t, t.log_eps(p), wr);
        });
    }
}

TEST_CASE("forward evaluation is bit-identical across runs") {
    RngStream rng(99);
    Tensord x = random_tensor(Dims{1, 2, 6, 6}, rng);
    Tensord w = random_tensor(Dims{3, 2, 3, 3}, rng);
    Tensord b = random_tensor(Dims{3}, rng);
    auto run = [&]() {
        Taped tape;
        const int c = tape.conv2d(tape.input(x), tape.input(w), tape.input(b), 2, 1);
        const int s = tape.softmax_last(tape.reshape(c, Dims{3, 9}));
        return tape.value(tape.sum_all(tape.log_eps(s)));
    };
    const Tensord a = run();
    const Tensord b2 = run();
    CHECK(std::memcmp(a.ptr(), b2.ptr(), a.data.size() * sizeof(double)) == 0);
}

namespace {

std::string thrown_message(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::invalid_argument& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("shape errors name the op and both shapes") {
    Taped tape;
    const int a = tape.input(Tensord(Dims{2, 3}, 1.0));
    const int b = tape.input(Tensord(Dims{4, 2}, 1.0));
    const std::string mm = thrown_message([&] { tape.matmul(a, b); });
    CHECK(mm.find("matmul") != std::string::npos);
    CHECK(mm.find("[2,3]") != std::string::npos);
    CHECK(mm.find("[4,2]") != std::string::npos);
    CHECK(thrown_message([&] { tape.add(a, b); }).find("add") != std::string::npos);
    const int img = tape.input(Tensord(Dims{1, 3, 4, 4}, 0.0));
    const int k = tape.input(Tensord(Dims{2, 5, 3, 3}, 0.0));
    const int kb = tape.input(Tensord(Dims{2}, 0.0));
    CHECK(thrown_message([&] { tape.conv2d(img, k, kb, 1, 0); }).find("conv2d") !=
          std::string::npos);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Taped tape;
    const int a = tape.input(Tensord(Dims{2, 2}, 1.0));
    const int y = tape.square(a);
    CHECK_THROWS_WITH_AS(tape.backward(y), doctest::Contains("scalar"), std::invalid_argument);
}

TEST_CASE("tensor construction validates shape against data") {
    CHECK_THROWS_AS(Tensord::from(Dims{2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensord(Dims{0, 2}), std::invalid_argument);
    CHECK_THROWS_AS(Tensord(Dims{-1}), std::invalid_argument);
}

TEST_CASE("rng streams are reproducible and independent") {
    RngStream a = RngStream::named(42, "gumbel");
    RngStream b = RngStream::named(42, "gumbel");
    RngStream c = RngStream::named(42, "data");
    std::vector<double> va, vb, vc;
    for (int i = 0; i < 16; ++i) {
        va.push_back(a.uniform01());
        vb.push_back(b.uniform01());
        vc.push_back(c.uniform01());
    }
    CHECK(va == vb);
    CHECK(va != vc);

    SUBCASE("state save and load resumes the exact sequence") {
        RngStream s(7);
        for (int i = 0; i < 5; ++i) s.uniform01();
        const std::string blob = s.save_state();
        const double next = s.uniform01();
        RngStream s2(999);
        s2.load_state(blob);
        CHECK(s2.uniform01() == next);
    }

    SUBCASE("normal samples have sane moments") {
        RngStream s(3);
        double sum = 0.0, sq = 0.0;
        const int n = 200000;
        for (int i = 0; i < n; ++i) {
            const double v = s.normal();
            sum += v;
            sq += v * v;
        }
        CHECK(std::fabs(sum / n) < 0.01);
        CHECK(std::fabs(sq / n - 1.0) < 0.02);
    }
}
