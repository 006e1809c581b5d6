import numpy as np
import pylab as plt

################### PLOTTING CONFIGURATIONS ###################
# https://matplotlib.org/stable/gallery/color/named_colors.html
family2color = {
    "TSN": "tab:gray",
    "I3D": "tab:blue",
    "S3D": "tab:orange",
    "TAM": "tab:green",
    "TSM": "tab:red",
    "Conv1D": "tab:purple",
    "TSN+NLN": "tab:brown",
}
default_color = "black"
figsize = (12, 9)
alpha = 0.8
marker = "o"
pooled_marker = "^"
markersize = 40
bar_width = 0.35
linewidth = 1
ticks_fontsize = 8
labels_fontsize = 14
legend_fontsize = 10
###############################################################


class ReportPlotter:
    """Figures of the analysis reports: accuracy against evaluation cost, pooling gains, Φ̄/Ψ̄ per architecture."""

    def __init__(self, costs=None, gains=None, summary=None):
        self.costs = costs
        self.gains = gains
        self.summary = summary

    @staticmethod
    def _tidy(ax, xlabel, ylabel):
        ax.set_xlabel(xlabel, fontsize=labels_fontsize)
        ax.set_ylabel(ylabel, fontsize=labels_fontsize)
        ax.tick_params(labelsize=ticks_fontsize, top=False, right=False, reset=True)
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)

    @staticmethod
    def scatter_plot(ax, costs, family):
        rows = costs[costs["family"] == family]
        color = family2color.get(family, default_color)
        for pooled, shape in ((False, marker), (True, pooled_marker)):
            subset = rows[rows["temporal_pool"] == pooled]
            if subset.empty:
                continue
            label = f"{family}-tp" if pooled else family
            ax.scatter(subset["total_flops"], subset["top1"], s=markersize, color=color, marker=shape, label=label)

    def _plot_accuracy_vs_flops(self):
        fig, ax = plt.subplots(figsize=figsize)
        for family in dict.fromkeys(self.costs["family"]):
            self.scatter_plot(ax, self.costs, family)
        ax.set_xscale("log")
        ax.legend(fontsize=legend_fontsize)
        self._tidy(ax, "Evaluation FLOPs per video (MACs)", "Top-1 accuracy (%)")
        fig.tight_layout()

    def _plot_gains(self):
        fig, ax = plt.subplots(figsize=figsize)
        labels = [f"{row.family}-{row.backbone}\n{row.frames}f" for row in self.gains.itertuples()]
        colors = [family2color.get(family, default_color) for family in self.gains["family"]] or default_color
        ax.bar(np.arange(len(labels)), self.gains["gain"], color=colors, alpha=alpha)
        ax.axhline(y=0, color=default_color, linewidth=linewidth)
        ax.set_xticks(np.arange(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        self._tidy(ax, "Model", "Top-1 gain with temporal pooling (points)")
        fig.tight_layout()

    def _plot_contributions(self):
        fig, ax = plt.subplots(figsize=figsize)
        labels = [f"{row.family}-tp" if row.temporal_pool else row.family for row in self.summary.itertuples()]
        xs = np.arange(len(labels))
        ax.bar(xs - bar_width / 2, self.summary["phi_mean"], width=bar_width, label=r"$\bar\Phi$", alpha=alpha)
        ax.bar(xs + bar_width / 2, self.summary["psi_mean"], width=bar_width, label=r"$\bar\Psi$", alpha=alpha)
        ax.axhline(y=0, color=default_color, linewidth=linewidth)
        ax.set_xticks(xs)
        ax.set_xticklabels(labels)
        ax.legend(fontsize=legend_fontsize)
        self._tidy(ax, "Architecture", "Average contribution")
        fig.tight_layout()

    def show_accuracy_vs_flops(self):
        self._plot_accuracy_vs_flops()
        plt.show()
        plt.close()

    def save_accuracy_vs_flops(self, path):
        self._plot_accuracy_vs_flops()
        plt.savefig(path)
        plt.close()

    def show_gains(self):
        self._plot_gains()
        plt.show()
        plt.close()

    def save_gains(self, path):
        self._plot_gains()
        plt.savefig(path)
        plt.close()

    def show_contributions(self):
        self._plot_contributions()
        plt.show()
        plt.close()

    def save_contributions(self, path):
        self._plot_contributions()
        plt.savefig(path)
        plt.close()
