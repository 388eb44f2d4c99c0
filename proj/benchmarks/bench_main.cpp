#include <benchmark/benchmark.h>

#include <random>

#include "msti/profiles.hpp"
#include "msti/scoring.hpp"
#include "msti/training.hpp"

using namespace msti;

namespace {

Tensor<float> noise(Shape s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    Tensor<float> t(s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

void BM_Conv3x3(benchmark::State& state) {
    const int c = static_cast<int>(state.range(0)), hw = static_cast<int>(state.range(1));
    auto x = Var<float>::leaf(noise(Shape{8, c, hw, hw}, 1), true);
    auto w = Var<float>::leaf(noise(Shape{c, c, 3, 3}, 2), true);
    auto b = Var<float>::leaf(noise(Shape{1, c, 1, 1}, 3), true);
    const auto target = Var<float>::constant(Tensor<float>(Shape{8, c, hw, hw}));
    for (auto _ : state) {
        x.zero_grad();
        w.zero_grad();
        b.zero_grad();
        backward(ops::squared_error(ops::conv2d(x, w, b, 1), target));
        benchmark::DoNotOptimize(w.grad()[0]);
    }
}
BENCHMARK(BM_Conv3x3)->Args({16, 64})->Args({32, 32})->Args({64, 16})->Unit(benchmark::kMillisecond);

void BM_MemoryRead(benchmark::State& state) {
    const int c = static_cast<int>(state.range(0));
    memory::MemoryBank<float> bank(10, c, 4);
    const auto q = Var<float>::constant(noise(Shape{8, c, 8, 8}, 5));
    for (auto _ : state) benchmark::DoNotOptimize(memory::read(q, bank.as_constant()).weights.value()[0]);
}
BENCHMARK(BM_MemoryRead)->Arg(64)->Arg(512)->Unit(benchmark::kMicrosecond);

void BM_MemoryUpdate(benchmark::State& state) {
    memory::MemoryBank<float> bank(10, 512, 6);
    const auto q = noise(Shape{1, 1, 512, 512}, 7);
    for (auto _ : state) {
        bank.update(q);
        benchmark::DoNotOptimize(bank.items()[0]);
    }
}
BENCHMARK(BM_MemoryUpdate)->Unit(benchmark::kMicrosecond);

void BM_TrainStep(benchmark::State& state) {
    const auto net = profiles::desk_network();
    const int b = profiles::desk_training().batch_size;
    train::TrainingState ts(net, ModelVariant{}, profiles::desk_training());
    data::Batch batch{noise(Shape{b, 3 * net.input_frames, net.resolution, net.resolution}, 8),
                      noise(Shape{b, 2 * net.input_frames, net.resolution, net.resolution}, 9),
                      noise(Shape{b, 3, net.resolution, net.resolution}, 10),
                      {}};
    for (auto _ : state) benchmark::DoNotOptimize(ts.step(batch).total);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_RocAuc(benchmark::State& state) {
    std::mt19937_64 rng(11);
    const auto n = static_cast<std::size_t>(state.range(0));
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
        s[i] = std::uniform_real_distribution<double>(0, 1)(rng);
        l[i] = static_cast<int>(i % 5 == 0);
    }
    for (auto _ : state) benchmark::DoNotOptimize(scoring::roc_auc(s, l));
}
BENCHMARK(BM_RocAuc)->Arg(2000)->Arg(200000)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
