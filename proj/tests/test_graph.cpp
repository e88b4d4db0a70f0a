#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dpc/gradcheck.hpp"
#include "dpc/graph.hpp"
#include "dpc/rng.hpp"
#include "dpc/tensor.hpp"

using namespace dpc;

namespace {

// ---------------- brute-force oracles, independent of graph.hpp ----------------

std::vector<double> oracle_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t kk = 0; kk < k; ++kk)
                out[i * n + j] += a[i * k + kk] * b[kk * n + j];
    return out;
}

double oracle_cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> oracle_softmax(const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double denom = 0;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        denom += out[i];
    }
    for (double& v : out) v /= denom;
    return out;
}

std::vector<double> oracle_layer_norm(const std::vector<double>& x, const std::vector<double>& g,
                                      const std::vector<double>& b, double eps) {
    const std::size_t w = x.size();
    double mean = 0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(w);
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w);
    std::vector<double> out(w);
    for (std::size_t i = 0; i < w; ++i)
        out[i] = g[i] * (x[i] - mean) / std::sqrt(var + eps) + b[i];
    return out;
}

TensorT<double> random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    TensorT<double> t(std::move(shape));
    for (auto& v : t.values) v = rng.gaussian() * scale;
    return t;
}

// max |a-b| over two equally shaped buffers
template <class A, class B>
double max_abs_diff(const A& a, const B& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

} // namespace

// ---------------- forward primitives ----------------

TEST(Primitives, AddElementwise) {
    TapeT<float> tape;
    auto a = tape.constant(row_vector<float>({1, 2}));
    auto b = tape.constant(row_vector<float>({3, 4}));
    auto c = add(a, b);
    EXPECT_FLOAT_EQ(c.tensor()[0], 4.0f);
    EXPECT_FLOAT_EQ(c.tensor()[1], 6.0f);
}

TEST(Primitives, SoftmaxUniform) {
    TapeT<float> tape;
    auto x = tape.constant(row_vector<float>({0, 0, 0}));
    auto y = softmax(x);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.tensor()[i], 1.0f / 3.0f, 1e-7f);
}

TEST(Primitives, MatmulAgainstTripleLoop) {
    Rng rng(7);
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({3, 4}, rng);
    TapeT<double> tape;
    auto c = matmul(tape.constant(a), tape.constant(b));
    auto expect = oracle_matmul(a.values, b.values, 2, 3, 4);
    EXPECT_LE(max_abs_diff(c.tensor().values, expect), 1e-6);
}

TEST(Primitives, ShapeMismatchNamesKindAndShapes) {
    TapeT<float> tape;
    auto a = tape.constant(TensorT<float>({2, 3}, 1.0f));
    auto b = tape.constant(TensorT<float>({2, 3}, 1.0f));
    try {
        matmul(a, b);
        FAIL() << "expected ContractViolation";
    } catch (const ContractViolation& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("(2,3)"), std::string::npos);
    }
}

TEST(Primitives, NonFiniteOutputIsNumericError) {
    TapeT<float> tape;
    auto a = tape.constant(row_vector<float>({1e38f, 1e38f}));
    EXPECT_THROW(mul(a, a), NumericError);
}

// Every forward primitive against an independent loop implementation on
// random small inputs.
TEST(Primitives, BruteForceAgreementOnRandomInputs) {
    Rng rng(11);
    for (int round = 0; round < 20; ++round) {
        const std::size_t m = 1 + rng.uniform_below(16);
        const std::size_t k = 1 + rng.uniform_below(16);
        const std::size_t n = 1 + rng.uniform_below(16);
        TapeT<double> tape;

        auto a = random_tensor({m, k}, rng);
        auto b = random_tensor({k, n}, rng);
        auto av = tape.constant(a), bv = tape.constant(b);
        EXPECT_LE(max_abs_diff(matmul(av, bv).tensor().values,
                               oracle_matmul(a.values, b.values, m, k, n)),
                  1e-12);

        auto x = random_tensor({k}, rng);
        auto y = random_tensor({k}, rng);
        auto xv = tape.constant(x), yv = tape.constant(y);

        std::vector<double> sum(k), prod(k), scl(k);
        for (std::size_t i = 0; i < k; ++i) {
            sum[i] = x.values[i] + y.values[i];
            prod[i] = x.values[i] * y.values[i];
            scl[i] = 2.5 * x.values[i];
        }
        EXPECT_LE(max_abs_diff(add(xv, yv).tensor().values, sum), 1e-12);
        EXPECT_LE(max_abs_diff(mul(xv, yv).tensor().values, prod), 1e-12);
        EXPECT_LE(max_abs_diff(scale(xv, 2.5).tensor().values, scl), 1e-12);
        EXPECT_LE(max_abs_diff(softmax(xv).tensor().values, oracle_softmax(x.values)), 1e-12);

        auto g = random_tensor({k}, rng, 0.3);
        auto be = random_tensor({k}, rng, 0.3);
        EXPECT_LE(max_abs_diff(layer_norm(xv, tape.constant(g), tape.constant(be)).tensor().values,
                               oracle_layer_norm(x.values, g.values, be.values, 1e-5)),
                  1e-12);

        EXPECT_NEAR(cosine_similarity(xv, yv).scalar(), oracle_cosine(x.values, y.values), 1e-12);

        double norm2 = 0;
        for (double v : x.values) norm2 += v * v;
        EXPECT_NEAR(l2_norm(xv).scalar(), std::sqrt(norm2), 1e-12);

        // mean over both axes
        auto mv = mean_axis(av, 0);
        for (std::size_t j = 0; j < k; ++j) {
            double acc = 0;
            for (std::size_t i = 0; i < m; ++i) acc += a.values[i * k + j];
            EXPECT_NEAR(mv.tensor()[j], acc / static_cast<double>(m), 1e-12);
        }

        // gather + concat round trip: splitting rows and re-concatenating is identity
        std::vector<ValueT<double>> rows;
        for (std::size_t i = 0; i < m; ++i) rows.push_back(gather_rows(av, {i}));
        EXPECT_LE(max_abs_diff(concat(rows, 0).tensor().values, a.values), 0.0);
    }
}

TEST(Primitives, GeluMatchesErfFormula) {
    TapeT<double> tape;
    auto x = tape.constant(row_vector<double>({-2.0, -0.5, 0.0, 0.7, 3.0}));
    auto y = gelu(x);
    for (std::size_t i = 0; i < 5; ++i) {
        const double v = x.tensor()[i];
        const double expect = v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        EXPECT_NEAR(y.tensor()[i], expect, 1e-15);
    }
}

// ---------------- cosine similarity contract ----------------

TEST(Cosine, OrthogonalSelfAndAnalytic) {
    TapeT<float> tape;
    auto e1 = tape.constant(row_vector<float>({1, 0}));
    auto e2 = tape.constant(row_vector<float>({0, 1}));
    auto v34 = tape.constant(row_vector<float>({3, 4}));
    auto ones = tape.constant(row_vector<float>({1, 1}));
    EXPECT_NEAR(cosine_similarity(e1, e2).scalar(), 0.0f, 1e-7f);
    EXPECT_NEAR(cosine_similarity(v34, v34).scalar(), 1.0f, 1e-7f);
    EXPECT_NEAR(cosine_similarity(ones, e1).scalar(), 0.7071068f, 1e-6f);
}

TEST(Cosine, ZeroNormIsError) {
    TapeT<float> tape;
    auto z = tape.constant(TensorT<float>({3}, 0.0f));
    auto v = tape.constant(row_vector<float>({1, 2, 3}));
    EXPECT_THROW(cosine_similarity(z, v), NumericError);
    EXPECT_THROW(cosine_similarity(v, z), NumericError);
}

TEST(Cosine, BoundedAndScaleInvariant) {
    Rng rng(23);
    for (int round = 0; round < 200; ++round) {
        const std::size_t d = 1 + rng.uniform_below(16);
        auto a = random_tensor({d}, rng, 2.0);
        auto b = random_tensor({d}, rng, 2.0);
        TapeT<double> tape;
        const double s = cosine_similarity(tape.constant(a), tape.constant(b)).scalar();
        EXPECT_GE(s, -1.0 - 1e-6);
        EXPECT_LE(s, 1.0 + 1e-6);
        for (double alpha : {0.5, 2.0, 10.0}) {
            TensorT<double> scaled = a;
            for (auto& v : scaled.values) v *= alpha;
            const double s2 = cosine_similarity(tape.constant(scaled), tape.constant(b)).scalar();
            EXPECT_NEAR(s2, s, 1e-6);
        }
    }
}

// ---------------- backward ----------------

TEST(Backward, ProductRuleWithFrozenFactor) {
    ParameterT<float> x("x", row_vector<float>({2}), true);
    ParameterT<float> y("y", row_vector<float>({5}), false);
    TapeT<float> tape;
    auto loss = mul(tape.use(x), tape.use(y));
    tape.backward(loss);
    EXPECT_FLOAT_EQ(x.grad[0], 5.0f);
    EXPECT_EQ(y.grad.size(), 0u); // frozen: no gradient storage at all
}

TEST(Backward, NonScalarLossRejected) {
    ParameterT<float> x("x", row_vector<float>({1, 2}), true);
    TapeT<float> tape;
    auto v = tape.use(x);
    EXPECT_THROW(tape.backward(v), ContractViolation);
}

TEST(Backward, DisconnectedTrainableParameterGetsZeroGradient) {
    ParameterT<float> used("used", row_vector<float>({3}), true);
    ParameterT<float> unused("unused", row_vector<float>({4}), true);
    TapeT<float> tape;
    auto u = tape.use(used);
    tape.use(unused);
    tape.backward(sum_all(mul(u, u)));
    EXPECT_FLOAT_EQ(used.grad[0], 6.0f);
    EXPECT_FLOAT_EQ(unused.grad[0], 0.0f);
}

TEST(Backward, SharedLeafAccumulatesOnce) {
    // z = x*x reuses the same leaf twice; d/dx = 2x
    ParameterT<double> x("x", row_vector<double>({3.0}), true);
    TapeT<double> tape;
    auto leaf = tape.use(x);
    tape.backward(mul(leaf, leaf));
    EXPECT_DOUBLE_EQ(x.grad[0], 6.0);
}

TEST(Backward, TapeRefusesSecondSweep) {
    ParameterT<double> x("x", row_vector<double>({3.0}), true);
    TapeT<double> tape;
    auto leaf = tape.use(x);
    auto loss = mul(leaf, leaf);
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), ContractViolation);
}

TEST(Backward, CosineGradientMatchesFiniteDifferences) {
    ParameterT<double> a("a", row_vector<double>({1.0, 0.0}), true);
    const TensorT<double> b = row_vector<double>({1.0, 1.0});
    auto report = grad_check(
        [&](TapeT<double>& tape) {
            return cosine_similarity(tape.use(a), tape.constant(b));
        },
        {&a}, 1e-6, 1e-6);
    EXPECT_TRUE(report.pass) << report.summary();
}

// Backward-vs-finite-difference agreement for every primitive.
TEST(Backward, EveryPrimitiveAgainstFiniteDifferences) {
    Rng rng(31);
    const std::size_t m = 3, k = 4, n = 2;
    auto a0 = random_tensor({m, k}, rng);
    auto b0 = random_tensor({k, n}, rng);
    auto v0 = random_tensor({k}, rng);
    auto w0 = random_tensor({k}, rng);

    // Fixed weighting constants; the loss closures must be pure functions of
    // the parameter, so nothing random may be drawn inside them.
    const auto km0 = random_tensor({k, m}, rng);
    const auto g3k = random_tensor({3, k}, rng);
    const auto mk0 = random_tensor({m, k}, rng);
    const auto rows2k = random_tensor({2, k}, rng);
    const auto cols_m2 = random_tensor({m, 2}, rng);
    const auto gamma0 = random_tensor({k}, rng, 0.5);
    const auto beta0 = random_tensor({k}, rng, 0.5);

    struct Case {
        const char* name;
        std::function<ValueT<double>(TapeT<double>&, ParameterT<double>&)> loss;
    };
    ParameterT<double> pa("a", a0, true);
    ParameterT<double> pv("v", v0, true);

    const std::vector<Case> matrix_cases = {
        {"matmul", [&](TapeT<double>& t, ParameterT<double>& p) {
             return sum_all(matmul(t.use(p), t.constant(b0)));
         }},
        {"transpose", [&](TapeT<double>& t, ParameterT<double>& p) {
             return sum_all(mul(transpose(t.use(p)), t.constant(km0)));
         }},
        {"mean_axis0", [&](TapeT<double>& t, ParameterT<double>& p) {
             return sum_all(mul(mean_axis(t.use(p), 0), t.constant(w0)));
         }},
        {"mean_axis1", [&](TapeT<double>& t, ParameterT<double>& p) {
             auto mv = mean_axis(t.use(p), 1);
             return sum_all(mul(mv, mv));
         }},
        {"gather", [&](TapeT<double>& t, ParameterT<double>& p) {
             return sum_all(mul(gather_rows(t.use(p), {1, 1, 0}), t.constant(g3k)));
         }},
        {"reshape", [&](TapeT<double>& t, ParameterT<double>& p) {
             auto r = reshape(t.use(p), {m * k});
             return sum_all(mul(r, r));
         }},
        {"add_rowvec", [&](TapeT<double>& t, ParameterT<double>& p) {
             auto s = add_rowvec(t.use(p), t.constant(w0));
             return sum_all(mul(s, s));
         }},
        {"softmax_rows", [&](TapeT<double>& t, ParameterT<double>& p) {
             return sum_all(mul(softmax(t.use(p), 1), t.constant(mk0)));
         }},
        {"concat_axis0", [&](TapeT<double>& t, ParameterT<double>& p) {
             auto c = concat<double>({t.use(p), t.constant(rows2k)}, 0);
             return sum_all(mul(c, c));
         }},
        {"concat_axis1", [&](TapeT<double>& t, ParameterT<double>& p) {
             auto c = concat<double>({t.use(p), t.constant(cols_m2)}, 1);
             return sum_all(mul(c, c));
         }},
    };
    const std::vector<Case> vector_cases = {
        {"add", [&](TapeT<double>& t, ParameterT<double>& p) {
             auto s = add(t.use(p), t.constant(w0));
             return sum_all(mul(s, s));
         }},
        {"mul", [&](TapeT<double>& t, ParameterT<double>& p) {
             return sum_all(mul(t.use(p), t.constant(w0)));
         }},
        {"scale", [&](TapeT<double>& t, ParameterT<double>& p) {
             auto s = scale(t.use(p), -1.7);
             return sum_all(mul(s, s));
         }},
        {"mul_scalar", [&](TapeT<double>& t, ParameterT<double>& p) {
             auto leaf = t.use(p);
             auto weight = l2_norm(leaf);
             return sum_all(mul_scalar(leaf, weight));
         }},
        {"gelu", [&](TapeT<double>& t, ParameterT<double>& p) {
             return sum_all(gelu(t.use(p)));
         }},
        {"relu", [&](TapeT<double>& t, ParameterT<double>& p) {
             return sum_all(relu(t.use(p)));
         }},
        {"softmax_vec", [&](TapeT<double>& t, ParameterT<double>& p) {
             return sum_all(mul(softmax(t.use(p)), t.constant(w0)));
         }},
        {"layer_norm", [&](TapeT<double>& t, ParameterT<double>& p) {
             auto y = layer_norm(t.use(p), t.constant(gamma0), t.constant(beta0));
             return sum_all(mul(y, y));
         }},
        {"l2_norm", [&](TapeT<double>& t, ParameterT<double>& p) {
             return l2_norm(t.use(p));
         }},
        {"cosine", [&](TapeT<double>& t, ParameterT<double>& p) {
             return cosine_similarity(t.use(p), t.constant(w0));
         }},
        {"cross_entropy", [&](TapeT<double>& t, ParameterT<double>& p) {
             return cross_entropy(t.use(p), 1, 2.0);
         }},
    };

    for (const auto& c : matrix_cases) {
        auto report = grad_check([&](TapeT<double>& t) { return c.loss(t, pa); }, {&pa}, 1e-5, 1e-4);
        EXPECT_TRUE(report.pass) << c.name << ": " << report.summary();
    }
    for (const auto& c : vector_cases) {
        auto report = grad_check([&](TapeT<double>& t) { return c.loss(t, pv); }, {&pv}, 1e-5, 1e-4);
        EXPECT_TRUE(report.pass) << c.name << ": " << report.summary();
    }
}

// Gradients also flow into the second operand of binary primitives.
TEST(Backward, SecondOperandGradients) {
    Rng rng(37);
    const std::size_t m = 3, k = 4, n = 2;
    auto a0 = random_tensor({m, k}, rng);
    ParameterT<double> pb("b", random_tensor({k, n}, rng), true);
    auto r1 = grad_check(
        [&](TapeT<double>& t) { return sum_all(matmul(t.constant(a0), t.use(pb))); }, {&pb}, 1e-5,
        1e-4);
    EXPECT_TRUE(r1.pass) << r1.summary();

    ParameterT<double> pg("gamma", random_tensor({k}, rng, 0.5), true);
    ParameterT<double> pbeta("beta", random_tensor({k}, rng, 0.5), true);
    auto x0 = random_tensor({k}, rng);
    auto r2 = grad_check(
        [&](TapeT<double>& t) {
            auto y = layer_norm(t.constant(x0), t.use(pg), t.use(pbeta));
            return sum_all(mul(y, y));
        },
        {&pg, &pbeta}, 1e-5, 1e-4);
    EXPECT_TRUE(r2.pass) << r2.summary();

    ParameterT<double> pc("cos_b", random_tensor({k}, rng), true);
    auto r3 = grad_check(
        [&](TapeT<double>& t) {
            return cosine_similarity(t.constant(x0), t.use(pc));
        },
        {&pc}, 1e-6, 1e-6);
    EXPECT_TRUE(r3.pass) << r3.summary();
}

// ---------------- grad_check plumbing ----------------

TEST(GradCheck, QuadraticAnalyticSix) {
    ParameterT<double> x("x", row_vector<double>({3.0}), true);
    auto report = grad_check(
        [&](TapeT<double>& tape) {
            auto leaf = tape.use(x);
            return mul(leaf, leaf);
        },
        {&x}, 1e-6, 1e-6);
    ASSERT_EQ(report.entries.size(), 1u);
    EXPECT_NEAR(report.entries[0].analytic, 6.0, 1e-12);
    EXPECT_NEAR(report.entries[0].numeric, 6.0, 1e-6);
    EXPECT_TRUE(report.pass);
}

TEST(GradCheck, CorruptedMultiplyBackwardIsCaught) {
    ParameterT<double> x("x", row_vector<double>({1.5, -2.0}), true);
    const TensorT<double> w = row_vector<double>({0.7, 0.3});
    hooks::corrupt_multiply_backward = true;
    auto report = grad_check(
        [&](TapeT<double>& tape) { return sum_all(mul(tape.use(x), tape.constant(w))); }, {&x},
        1e-5, 1e-4);
    hooks::corrupt_multiply_backward = false;
    EXPECT_FALSE(report.pass);
    EXPECT_GT(report.max_rel_err, 0.1);
}

TEST(GradCheck, NonDeterministicFunctionAborts) {
    ParameterT<double> x("x", row_vector<double>({1.0}), true);
    int calls = 0;
    auto report = grad_check(
        [&](TapeT<double>& tape) {
            auto leaf = tape.use(x);
            auto jitter = tape.constant(row_vector<double>({static_cast<double>(calls++)}));
            return mul(add(leaf, jitter), leaf);
        },
        {&x}, 1e-6, 1e-6);
    EXPECT_TRUE(report.aborted);
    EXPECT_NE(report.diagnosis.find("non-deterministic"), std::string::npos);
}

TEST(GradCheck, SampledSubsetRecordsIndices) {
    Rng rng(41);
    ParameterT<double> x("x", random_tensor({6, 5}, rng), true);
    auto report = grad_check(
        [&](TapeT<double>& tape) {
            auto leaf = tape.use(x);
            return sum_all(mul(leaf, leaf));
        },
        {&x}, 1e-6, 1e-6, 10, 99);
    EXPECT_EQ(report.entries.size(), 10u);
    for (const auto& e : report.entries) EXPECT_LT(e.index, 30u);
    EXPECT_TRUE(report.pass);
}

// ---------------- tensor basics ----------------

TEST(Tensor, ShapeValueCountInvariant) {
    EXPECT_THROW(TensorT<float>({2, 3}, std::vector<float>(5, 0.0f)), ContractViolation);
    EXPECT_THROW(TensorT<float>({0, 3}), ContractViolation);
}

TEST(Tensor, FrozenParameterHasNoGradStorage) {
    ParameterT<float> p("w", TensorT<float>({4, 4}, 1.0f), false);
    EXPECT_EQ(p.grad.size(), 0u);
    p.zero_grad(); // no-op, must not crash
    EXPECT_EQ(p.grad.size(), 0u);
}
