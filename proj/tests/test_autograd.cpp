#include <node/autograd.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace node;
using namespace node::ag;
using Td = Tensor<double>;

namespace {

Td random_tensor(Shape s, std::uint64_t seed, bool grad = true, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(s.size());
    rng::Stream r(seed, 0);
    for (auto& x : v) x = lo + (hi - lo) * r.uniform();
    return Td::from(s, std::move(v), grad);
}

// Independent central-difference gradient of a scalar function with respect
// to every element of `t`.
std::vector<double> numeric_grad(const std::function<double()>& f, Td t, double h = 1e-5) {
    std::vector<double> g(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double orig = t.data()[i];
        t.data()[i] = orig + h;
        const double fp = f();
        t.data()[i] = orig - h;
        const double fm = f();
        t.data()[i] = orig;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

double max_rel(const std::vector<double>& a, std::span<const double> n) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::fabs(a[i] - n[i]) / std::max({std::fabs(a[i]), std::fabs(n[i]), 1e-6}));
    }
    return worst;
}

// Checks d<u, op(inputs)>/d input_k for every input via numeric_grad.
void expect_gradients(const std::function<Td(const std::vector<Td>&)>& op, std::vector<Td> inputs, double tol = 1e-4,
                      std::uint64_t seed = 99) {
    Td out = op(inputs);
    const Td u = random_tensor(out.shape(), seed, false);
    for (auto& in : inputs) {
        in.grad();
        in.zero_grad();
    }
    auto loss = [&]() {
        Td o = op(inputs);
        double acc = 0.0;
        for (std::size_t i = 0; i < o.size(); ++i) acc += u.data()[i] * o.data()[i];
        return acc;
    };
    out.backward(u.data());
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        const auto n = numeric_grad(loss, inputs[k]);
        EXPECT_LT(max_rel(n, inputs[k].grad()), tol) << "input " << k;
    }
}

// Direct nested-loop cross-correlation used as an oracle for the GEMM path.
std::vector<double> naive_conv(const Td& x, const Td& w, const Td& b, int stride, int pad) {
    const auto xs = x.shape(), ws = w.shape();
    const int oh = (xs.h + 2 * pad - ws.h) / stride + 1, ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(xs.n) * ws.n * oh * ow);
    for (int n = 0; n < xs.n; ++n)
        for (int o = 0; o < ws.n; ++o)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    double acc = b.defined() ? b.data()[o] : 0.0;
                    for (int c = 0; c < xs.c; ++c)
                        for (int ki = 0; ki < ws.h; ++ki)
                            for (int kj = 0; kj < ws.w; ++kj) {
                                const int ih = i * stride - pad + ki, iw = j * stride - pad + kj;
                                if (ih < 0 || iw < 0 || ih >= xs.h || iw >= xs.w) continue;
                                acc += x.data()[((static_cast<std::size_t>(n) * xs.c + c) * xs.h + ih) * xs.w + iw] *
                                       w.data()[((static_cast<std::size_t>(o) * ws.c + c) * ws.h + ki) * ws.w + kj];
                            }
                    y[((static_cast<std::size_t>(n) * ws.n + o) * oh + i) * ow + j] = acc;
                }
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace

TEST(Conv2d, OnesKernel) {
    auto x = Td::from({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    auto w = Td::from({1, 1, 2, 2}, std::vector<double>(4, 1.0));
    auto y = conv2d(x, w, Td{});
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (double v : y.data()) EXPECT_EQ(v, 4.0);
}

TEST(Conv2d, IdentityKernel) {
    auto x = random_tensor({2, 3, 5, 4}, 1, false);
    std::vector<double> wv(9, 0.0);
    for (int c = 0; c < 3; ++c) wv[c * 3 + c] = 1.0;
    auto y = conv2d(x, Td::from({3, 3, 1, 1}, wv), Td{});
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, MatchesDirectLoops) {
    int trial = 0;
    for (int stride : {1, 2})
        for (int pad : {0, 1, 2})
            for (int k : {1, 2, 3}) {
                auto x = random_tensor({2, 3, 7, 6}, 10 + trial, false);
                auto w = random_tensor({4, 3, k, k}, 20 + trial, false);
                auto b = random_tensor({1, 4, 1, 1}, 30 + trial, false);
                ++trial;
                const auto y = conv2d(x, w, b, {stride, pad});
                const auto ref = naive_conv(x, w, b, stride, pad);
                ASSERT_EQ(y.size(), ref.size());
                for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
            }
}

TEST(Conv2d, ShapeMismatch) {
    EXPECT_THROW(conv2d(random_tensor({1, 3, 4, 4}, 1), random_tensor({2, 2, 3, 3}, 2), Td{}), ShapeError);
    EXPECT_THROW(conv2d(random_tensor({1, 2, 4, 4}, 1), random_tensor({2, 2, 3, 3}, 2), random_tensor({1, 3, 1, 1}, 3)), ShapeError);
}

TEST(Conv2d, FiniteDifferenceGradients) {
    struct Case {
        Shape x;
        int oc, k, stride, pad;
    };
    const std::vector<Case> cases{{{1, 1, 4, 4}, 1, 3, 1, 1}, {{2, 3, 5, 6}, 4, 3, 1, 1}, {{2, 8, 9, 9}, 3, 3, 1, 1},
                                  {{1, 2, 8, 8}, 3, 2, 2, 0}, {{2, 4, 9, 9}, 2, 3, 2, 1}, {{1, 5, 6, 7}, 6, 1, 1, 0}};
    std::uint64_t seed = 100;
    for (const auto& c : cases) {
        auto x = random_tensor(c.x, seed++);
        auto w = random_tensor({c.oc, c.x.c, c.k, c.k}, seed++);
        auto b = random_tensor({1, c.oc, 1, 1}, seed++);
        expect_gradients([&](const std::vector<Td>& in) { return conv2d(in[0], in[1], in[2], {c.stride, c.pad}); }, {x, w, b});
    }
}

TEST(Conv2d, Linearity) {
    auto x = random_tensor({2, 3, 6, 6}, 1, false);
    auto y = random_tensor({2, 3, 6, 6}, 2, false);
    auto w = random_tensor({4, 3, 3, 3}, 3, false);
    const double a = 0.7, b = -1.3;
    std::vector<double> mix(x.size());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x.data()[i] + b * y.data()[i];
    const auto lhs = conv2d(Td::from(x.shape(), mix), w, Td{}, {1, 1});
    const auto cx = conv2d(x, w, Td{}, {1, 1});
    const auto cy = conv2d(y, w, Td{}, {1, 1});
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs.data()[i], a * cx.data()[i] + b * cy.data()[i], 1e-10);
}

TEST(ConvTranspose2d, SinglePixelStamp) {
    auto x = Td::from({1, 1, 1, 1}, {3.0});
    auto w = Td::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    auto y = conv_transpose2d(x, w, Td{}, {2, 0});
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{3.0, 6.0, 9.0, 12.0}));
}

TEST(ConvTranspose2d, AdjointIdentity) {
    struct Case {
        Shape x;
        int oc, k, stride, pad;
    };
    const std::vector<Case> cases{{{2, 3, 8, 8}, 5, 2, 2, 0}, {{1, 4, 7, 9}, 2, 3, 1, 1}, {{2, 2, 9, 9}, 3, 3, 2, 1}};
    std::uint64_t seed = 500;
    for (const auto& c : cases) {
        auto x = random_tensor(c.x, seed++, false);
        auto w = random_tensor({c.oc, c.x.c, c.k, c.k}, seed++, false);
        const auto cx = conv2d(x, w, Td{}, {c.stride, c.pad});
        auto y = random_tensor(cx.shape(), seed++, false);
        const auto ty = conv_transpose2d(y, w, Td{}, {c.stride, c.pad});
        ASSERT_EQ(ty.shape(), x.shape());
        EXPECT_NEAR(dot(cx.data(), y.data()), dot(x.data(), ty.data()), 1e-10);
    }
}

TEST(ConvTranspose2d, FiniteDifferenceGradients) {
    auto x = random_tensor({2, 4, 4, 5}, 1);
    auto w = random_tensor({4, 3, 2, 2}, 2);
    auto b = random_tensor({1, 3, 1, 1}, 3);
    expect_gradients([](const std::vector<Td>& in) { return conv_transpose2d(in[0], in[1], in[2], {2, 0}); }, {x, w, b});
    auto x2 = random_tensor({1, 3, 5, 5}, 4);
    auto w2 = random_tensor({3, 2, 3, 3}, 5);
    auto b2 = random_tensor({1, 2, 1, 1}, 6);
    expect_gradients([](const std::vector<Td>& in) { return conv_transpose2d(in[0], in[1], in[2], {1, 1}); }, {x2, w2, b2});
}

TEST(LeakyRelu, Values) {
    auto x = Td::from({1, 1, 1, 2}, {2.0, -2.0});
    auto y = leaky_relu(x, 0.2);
    EXPECT_DOUBLE_EQ(y.data()[0], 2.0);
    EXPECT_DOUBLE_EQ(y.data()[1], -0.4);
    auto r = leaky_relu(x, 0.0);
    EXPECT_EQ(r.data()[1], 0.0);
    EXPECT_THROW(leaky_relu(x, 1.0), ShapeError);
}

TEST(LeakyRelu, FiniteDifferenceAwayFromKink) {
    auto x = random_tensor({2, 3, 4, 4}, 7);
    for (auto& v : x.data())
        if (std::fabs(v) < 1e-3) v = 0.5;
    expect_gradients([](const std::vector<Td>& in) { return leaky_relu(in[0], 0.2); }, {x});
}

TEST(MaxPool, ValuesAndTies) {
    auto x = Td::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
    auto y = maxpool2d(x);
    EXPECT_EQ(y.item(), 4.0);
    auto c = Td::from({1, 1, 2, 2}, {5, 5, 5, 5}, true);
    auto yc = maxpool2d(c);
    EXPECT_EQ(yc.item(), 5.0);
    yc.backward();
    // First maximum in row-major order takes the whole gradient.
    EXPECT_EQ(std::vector<double>(c.grad().begin(), c.grad().end()), (std::vector<double>{1, 0, 0, 0}));
    EXPECT_THROW(maxpool2d(random_tensor({1, 1, 3, 4}, 1)), ShapeError);
}

TEST(MaxPool, FiniteDifferenceDistinctValues) {
    Shape s{2, 3, 6, 8};
    std::vector<double> v(s.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>((i * 7919) % v.size()) * 0.01;
    expect_gradients([](const std::vector<Td>& in) { return maxpool2d(in[0]); }, {Td::from(s, v, true)});
}

TEST(SpaceToDepth, OrderingAndRoundTrip) {
    auto x = Td::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = space_to_depth(x);
    EXPECT_EQ(y.shape(), (Shape{1, 4, 1, 1}));
    EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{1, 2, 3, 4}));
    for (std::uint64_t t = 0; t < 50; ++t) {
        auto r = random_tensor({2, 3, 4, 6}, t, false);
        auto back = depth_to_space(space_to_depth(r));
        ASSERT_EQ(back.shape(), r.shape());
        for (std::size_t i = 0; i < r.size(); ++i) ASSERT_EQ(back.data()[i], r.data()[i]);
        auto d = random_tensor({1, 8, 3, 2}, t + 100, false);
        auto back2 = space_to_depth(depth_to_space(d));
        for (std::size_t i = 0; i < d.size(); ++i) ASSERT_EQ(back2.data()[i], d.data()[i]);
    }
    EXPECT_THROW(space_to_depth(random_tensor({1, 1, 3, 4}, 1)), ShapeError);
    EXPECT_THROW(depth_to_space(random_tensor({1, 3, 2, 2}, 1)), ShapeError);
}

TEST(SpaceToDepth, FiniteDifference) {
    expect_gradients([](const std::vector<Td>& in) { return space_to_depth(in[0]); }, {random_tensor({2, 2, 4, 6}, 3)});
    expect_gradients([](const std::vector<Td>& in) { return depth_to_space(in[0]); }, {random_tensor({2, 8, 2, 3}, 4)});
}

TEST(ConcatChannels, ShapesAndGradients) {
    auto a = random_tensor({1, 4, 3, 3}, 1), b = random_tensor({1, 4, 3, 3}, 2), c = random_tensor({1, 4, 3, 3}, 3);
    EXPECT_EQ(concat_channels<double>({a, b, c}).shape().c, 12);
    auto single = concat_channels<double>({a});
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(single.data()[i], a.data()[i]);
    EXPECT_THROW(concat_channels<double>({a, random_tensor({1, 4, 3, 2}, 4)}), ShapeError);
    expect_gradients([](const std::vector<Td>& in) { return concat_channels<double>({in[0], in[1], in[2]}); },
                     {random_tensor({2, 1, 3, 3}, 5), random_tensor({2, 3, 3, 3}, 6), random_tensor({2, 2, 3, 3}, 7)});
}

TEST(L1Loss, ValuesAndGradient) {
    auto a = random_tensor({1, 2, 3, 3}, 1, false);
    EXPECT_EQ(l1_loss(a, a).item(), 0.0);
    std::vector<double> shifted(a.data().begin(), a.data().end());
    for (auto& v : shifted) v -= 0.25;
    EXPECT_NEAR(l1_loss(a, Td::from(a.shape(), shifted)).item(), 0.25, 1e-15);
    auto p = random_tensor({2, 2, 3, 3}, 2);
    auto t = random_tensor({2, 2, 3, 3}, 3);
    for (std::size_t i = 0; i < p.size(); ++i)
        if (std::fabs(p.data()[i] - t.data()[i]) < 1e-3) p.data()[i] += 0.1;
    expect_gradients([](const std::vector<Td>& in) { return l1_loss(in[0], in[1]); }, {p, t});
    EXPECT_THROW(l1_loss(p, random_tensor({2, 2, 3, 2}, 4)), ShapeError);
}

TEST(Graph, FanOutAccumulates) {
    auto x = random_tensor({1, 2, 4, 4}, 11);
    auto w = random_tensor({2, 2, 3, 3}, 12, false);
    auto f = [&](const Td& in) { return sum(leaky_relu(conv2d(in, w, Td{}, {1, 1}), 0.2)); };
    auto g = [&](const Td& in) { return sum(maxpool2d(in)); };
    auto total = add(f(x), g(x));
    total.backward();
    const std::vector<double> combined(x.grad().begin(), x.grad().end());
    x.zero_grad();
    f(x).backward();
    std::vector<double> branch(x.grad().begin(), x.grad().end());
    x.zero_grad();
    g(x).backward();
    for (std::size_t i = 0; i < branch.size(); ++i) EXPECT_NEAR(combined[i], branch[i] + x.grad()[i], 1e-12);
    // A shared subexpression is visited once.
    auto y = leaky_relu(x, 0.2);
    const auto order = topological_order(add(y, y).node());
    EXPECT_EQ(order.size(), 3u);
}

TEST(Graph, BitDeterministic) {
    auto run = [] {
        auto x = random_tensor({2, 3, 8, 8}, 1);
        auto w = random_tensor({4, 3, 3, 3}, 2);
        auto loss = sum(maxpool2d(leaky_relu(conv2d(x, w, Td{}, {1, 1}), 0.2)));
        loss.backward();
        std::vector<double> out(w.grad().begin(), w.grad().end());
        out.push_back(loss.item());
        return out;
    };
    EXPECT_EQ(run(), run());
}

TEST(Adam, FirstStepMagnitude) {
    for (double c : {1.0, -3.0, 250.0}) {
        auto p = Td::from({1, 1, 1, 1}, {0.5}, true);
        ParameterList<double> params{{"p", p}};
        auto state = make_adam(params);
        p.grad()[0] = c;
        adam_step(params, state);
        const double step = 0.5 - p.data()[0];
        EXPECT_NEAR(std::fabs(step), 1e-4, 1e-6 * 1e-4);
        EXPECT_EQ(std::signbit(step), std::signbit(c));
    }
}

TEST(Adam, ZeroGradientLeavesParameters) {
    auto p = random_tensor({1, 2, 3, 3}, 1);
    const std::vector<double> before(p.data().begin(), p.data().end());
    ParameterList<double> params{{"p", p}};
    auto state = make_adam(params);
    zero_grad(params);
    adam_step(params, state);
    EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), before);
}

TEST(Adam, TwoEnginesStayIdentical) {
    auto a = random_tensor({1, 3, 4, 4}, 5);
    auto b = random_tensor({1, 3, 4, 4}, 5);
    ParameterList<double> pa{{"w", a}}, pb{{"w", b}};
    auto sa = make_adam(pa), sb = make_adam(pb);
    for (int step = 0; step < 1000; ++step) {
        rng::Stream g(77, static_cast<std::uint64_t>(step));
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double v = g.normal();
            a.grad()[i] = v;
            b.grad()[i] = v;
        }
        adam_step(pa, sa);
        adam_step(pb, sb);
    }
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
}

TEST(GradCheck, PassesOnLayers) {
    auto x = random_tensor({1, 3, 8, 8}, 1);
    auto w = random_tensor({4, 3, 3, 3}, 2);
    auto b = random_tensor({1, 4, 1, 1}, 3);
    auto y = l1_loss(depth_to_space(space_to_depth(leaky_relu(conv2d(x, w, b, {1, 1}), 0.2))), random_tensor({1, 4, 8, 8}, 4, false));
    const auto local = check_graph(y);
    EXPECT_TRUE(local.passed) << local.summary();
    const auto e2e = check_gradients<double>(
        [&] { return l1_loss(leaky_relu(conv2d(x, w, b, {1, 1}), 0.2), random_tensor({1, 4, 8, 8}, 4, false)); },
        {{"x", x}, {"w", w}, {"b", b}});
    EXPECT_TRUE(e2e.passed) << e2e.summary();
}

TEST(GradCheck, CorruptedBackwardIsNamed) {
    // Square with a backward that forgets the factor 2.
    auto broken_square = [](const Td& x) {
        return make_op<double>(
            "broken_square", x.shape(), {x},
            [](Node<double>& out) {
                const auto& in = out.inputs[0]->data;
                for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = in[i] * in[i];
            },
            [](Node<double>& out) {
                auto& g = out.inputs[0]->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.inputs[0]->data[i] * out.grad[i];
            });
    };
    auto x = random_tensor({1, 2, 4, 4}, 9);
    auto w = random_tensor({2, 2, 3, 3}, 10);
    auto y = sum(broken_square(conv2d(x, w, Td{}, {1, 1})));
    const auto report = check_graph(y);
    EXPECT_FALSE(report.passed);
    EXPECT_NE(report.worst.find("broken_square"), std::string::npos) << report.worst;
    for (const auto& e : report.entries) {
        if (e.name.find("conv2d") != std::string::npos) EXPECT_LT(e.max_rel_error, 1e-4);
    }
}

TEST(Checkpoint, RoundTripAndErrors) {
    Checkpoint c;
    c.header["architecture"] = {{"format", "test"}};
    auto w = random_tensor({2, 3, 3, 3}, 1, false);
    std::vector<float> f = {1.5f, -2.25f, 3.0e-7f};
    c.tensors.push_back(StoredTensor::from<double>("w", {2, 3, 3, 3}, w.data()));
    c.tensors.push_back(StoredTensor::from<float>("f", {3}, std::span<const float>(f)));
    const auto bytes = serialize(c);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "NODEckpt");
    const auto back = deserialize(bytes);
    EXPECT_EQ(back.header, c.header);
    EXPECT_EQ(back.tensors, c.tensors);
    EXPECT_EQ(back.at("f").values<float>(), f);
    EXPECT_THROW(back.at("f").values<double>(), CompatibilityError);
    auto truncated = bytes;
    truncated.resize(truncated.size() - 3);
    EXPECT_THROW(deserialize(truncated), TruncatedError);
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(deserialize(bad), FormatError);
}
